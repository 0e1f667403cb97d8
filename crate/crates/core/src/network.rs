//! Road network graph: junctions, directed road edges, per-edge dynamics and
//! the state encoding consumed by the Q-network.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of road occupied by one vehicle slot at jam density (vehicle + gap).
pub const JAM_SLOT_METERS: f64 = 7.5;

/// Floor speed used wherever a travel time is derived from an observed speed.
pub const MIN_SPEED: f64 = 0.5;

/// Number of columns produced by [`encode_state`].
pub const FEATURE_COUNT: usize = 13;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("unknown edge {0}")]
    UnknownEdge(String),
    #[error("unknown junction {0}")]
    UnknownJunction(String),
    #[error("missing dynamics: state has {got} rows, network has {expected} edges")]
    MissingDynamics { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadType {
    Straight,
    Curved,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficCondition {
    Low,
    High,
}

/// Lane count bucketed the way preference vectors see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LaneClass {
    #[serde(rename = "one")]
    One,
    #[serde(rename = "two")]
    Two,
    #[serde(rename = "three+")]
    ThreePlus,
}

impl LaneClass {
    pub fn from_lanes(lanes: u32) -> Self {
        match lanes {
            0 | 1 => LaneClass::One,
            2 => LaneClass::Two,
            _ => LaneClass::ThreePlus,
        }
    }
}

impl RoadType {
    pub const ALL: [RoadType; 3] = [RoadType::Straight, RoadType::Curved, RoadType::Ramp];
}

impl Complexity {
    pub const ALL: [Complexity; 2] = [Complexity::Simple, Complexity::Complex];
}

impl TrafficCondition {
    pub const ALL: [TrafficCondition; 2] = [TrafficCondition::Low, TrafficCondition::High];
}

impl LaneClass {
    pub const ALL: [LaneClass; 3] = [LaneClass::One, LaneClass::Two, LaneClass::ThreePlus];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub traffic_light: bool,
    #[serde(default = "default_complexity")]
    pub complexity: Complexity,
}

fn default_complexity() -> Complexity {
    Complexity::Simple
}

/// Static description of a directed road between two junctions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadEdge {
    pub from: String,
    pub to: String,
    /// meters
    pub length: f64,
    pub lanes: u32,
    pub road_type: RoadType,
    /// m/s
    pub speed_limit: f64,
}

impl RoadEdge {
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed_limit
    }

    /// Number of vehicle slots at jam density over all lanes.
    pub fn jam_capacity(&self) -> f64 {
        self.length * self.lanes as f64 / JAM_SLOT_METERS
    }
}

/// Index of an edge in canonical (lexicographic `(from, to)`) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId(pub usize);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// The on-disk network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    #[serde(default)]
    pub name: String,
    pub junctions: Vec<Junction>,
    pub edges: Vec<RoadEdge>,
}

/// Validated, immutable road network.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    name: String,
    junctions: Vec<Junction>,
    edges: Vec<RoadEdge>,
    junction_index: HashMap<String, usize>,
    edge_index: HashMap<(usize, usize), EdgeId>,
    endpoints: Vec<(usize, usize)>,
    outgoing: Vec<Vec<EdgeId>>,
    incoming: Vec<Vec<EdgeId>>,
}

impl RoadNetwork {
    pub fn from_document(doc: NetworkDocument) -> Result<Self, NetworkError> {
        let mut junctions = doc.junctions;
        junctions.sort_by(|a, b| a.id.cmp(&b.id));
        for w in junctions.windows(2) {
            if w[0].id == w[1].id {
                return Err(NetworkError::Topology(format!("duplicate junction {}", w[0].id)));
            }
        }
        for j in &junctions {
            if j.id.is_empty() || j.id.contains("->") {
                return Err(NetworkError::Value(format!("invalid junction id {:?}", j.id)));
            }
            if !j.x.is_finite() || !j.y.is_finite() {
                return Err(NetworkError::Value(format!("junction {} has non-finite position", j.id)));
            }
        }
        let junction_index: HashMap<String, usize> =
            junctions.iter().enumerate().map(|(i, j)| (j.id.clone(), i)).collect();

        let mut edges = doc.edges;
        for e in &edges {
            for end in [&e.from, &e.to] {
                if !junction_index.contains_key(end) {
                    return Err(NetworkError::Topology(format!(
                        "edge {}->{} references missing junction {}",
                        e.from, e.to, end
                    )));
                }
            }
            if e.from == e.to {
                return Err(NetworkError::Topology(format!("self-loop at {}", e.from)));
            }
            if !(e.length > 0.0 && e.length.is_finite()) {
                return Err(NetworkError::Value(format!("edge {}->{} length {}", e.from, e.to, e.length)));
            }
            if e.lanes == 0 {
                return Err(NetworkError::Value(format!("edge {}->{} has zero lanes", e.from, e.to)));
            }
            if !(e.speed_limit > 0.0 && e.speed_limit.is_finite()) {
                return Err(NetworkError::Value(format!(
                    "edge {}->{} speed limit {}",
                    e.from, e.to, e.speed_limit
                )));
            }
        }
        edges.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
        for w in edges.windows(2) {
            if w[0].from == w[1].from && w[0].to == w[1].to {
                return Err(NetworkError::Topology(format!("duplicate edge {}->{}", w[0].from, w[0].to)));
            }
        }

        let n = junctions.len();
        let mut outgoing = vec![Vec::new(); n];
        let mut incoming = vec![Vec::new(); n];
        let mut endpoints = Vec::with_capacity(edges.len());
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            let (a, b) = (junction_index[&e.from], junction_index[&e.to]);
            endpoints.push((a, b));
            edge_index.insert((a, b), EdgeId(i));
            outgoing[a].push(EdgeId(i));
            incoming[b].push(EdgeId(i));
        }
        Ok(Self {
            name: doc.name,
            junctions,
            edges,
            junction_index,
            edge_index,
            endpoints,
            outgoing,
            incoming,
        })
    }

    /// Parses a JSON network document.
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let doc: NetworkDocument =
            serde_json::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            name: self.name.clone(),
            junctions: self.junctions.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("network document serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }

    pub fn num_junctions(&self) -> usize {
        self.junctions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, id: EdgeId) -> &RoadEdge {
        &self.edges[id.0]
    }

    pub fn edge_checked(&self, id: EdgeId) -> Result<&RoadEdge, NetworkError> {
        self.edges.get(id.0).ok_or_else(|| NetworkError::UnknownEdge(id.to_string()))
    }

    pub fn junction(&self, index: usize) -> &Junction {
        &self.junctions[index]
    }

    pub fn junction_index(&self, id: &str) -> Result<usize, NetworkError> {
        self.junction_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::UnknownJunction(id.to_string()))
    }

    /// `(from, to)` junction indices of an edge.
    pub fn endpoints(&self, id: EdgeId) -> (usize, usize) {
        self.endpoints[id.0]
    }

    pub fn find_edge(&self, from: usize, to: usize) -> Option<EdgeId> {
        self.edge_index.get(&(from, to)).copied()
    }

    pub fn outgoing(&self, junction: usize) -> &[EdgeId] {
        &self.outgoing[junction]
    }

    pub fn incoming(&self, junction: usize) -> &[EdgeId] {
        &self.incoming[junction]
    }

    /// Stable textual key `from->to`, used in files and logs.
    pub fn edge_key(&self, id: EdgeId) -> String {
        let e = &self.edges[id.0];
        format!("{}->{}", e.from, e.to)
    }

    pub fn edge_by_key(&self, key: &str) -> Result<EdgeId, NetworkError> {
        let (from, to) = key
            .split_once("->")
            .ok_or_else(|| NetworkError::UnknownEdge(key.to_string()))?;
        let a = self.junction_index(from.trim())?;
        let b = self.junction_index(to.trim())?;
        self.find_edge(a, b).ok_or_else(|| NetworkError::UnknownEdge(key.to_string()))
    }

    /// Complexity of the junction an edge leads into.
    pub fn edge_complexity(&self, id: EdgeId) -> Complexity {
        self.junctions[self.endpoints[id.0].1].complexity
    }

    pub fn free_flow_state(&self) -> NetworkState {
        NetworkState::free_flow(self)
    }

    /// Topology view used by the graph network.
    pub fn topology(&self) -> GraphTopology {
        GraphTopology {
            num_nodes: self.junctions.len(),
            edges: self.endpoints.clone(),
        }
    }

    fn feature_bounds(&self) -> FeatureBounds {
        let mut b = FeatureBounds {
            min_length: f64::INFINITY,
            max_length: 0.0,
            min_lanes: u32::MAX,
            max_lanes: 0,
            max_speed: 0.0,
            min_time: f64::INFINITY,
            max_time: 0.0,
        };
        for e in &self.edges {
            b.min_length = b.min_length.min(e.length);
            b.max_length = b.max_length.max(e.length);
            b.min_lanes = b.min_lanes.min(e.lanes);
            b.max_lanes = b.max_lanes.max(e.lanes);
            b.max_speed = b.max_speed.max(e.speed_limit);
            b.min_time = b.min_time.min(e.free_flow_time());
            b.max_time = b.max_time.max(e.length / MIN_SPEED);
        }
        b
    }
}

struct FeatureBounds {
    min_length: f64,
    max_length: f64,
    min_lanes: u32,
    max_lanes: u32,
    max_speed: f64,
    min_time: f64,
    max_time: f64,
}

fn min_max(value: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Directed graph shape without attributes: node count and `(from, to)` per edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

/// Time-varying attributes of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDynamics {
    /// occupied fraction of lane length, in [0, 1]
    pub occupancy: f64,
    /// vehicles currently on the edge
    pub usage: f64,
    /// mean speed of vehicles on the edge, m/s
    pub mean_speed: f64,
    /// seconds to traverse the edge at `mean_speed`
    pub travel_time: f64,
    /// committed vehicles whose remaining route contains this edge
    pub future_usage: f64,
    /// seconds until the downstream signal next shows green for this edge (0 without a signal)
    #[serde(default)]
    pub signal_wait: f64,
    pub timestamp: f64,
}

impl EdgeDynamics {
    pub fn free_flow(edge: &RoadEdge, t: f64) -> Self {
        Self {
            occupancy: 0.0,
            usage: 0.0,
            mean_speed: edge.speed_limit,
            travel_time: edge.free_flow_time(),
            future_usage: 0.0,
            signal_wait: 0.0,
            timestamp: t,
        }
    }
}

/// Snapshot of all edge dynamics plus the selected-path indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub time: f64,
    pub dynamics: Vec<EdgeDynamics>,
    pub selected: Vec<bool>,
}

impl NetworkState {
    pub fn free_flow(network: &RoadNetwork) -> Self {
        Self {
            time: 0.0,
            dynamics: network.edges.iter().map(|e| EdgeDynamics::free_flow(e, 0.0)).collect(),
            selected: vec![false; network.num_edges()],
        }
    }

    pub fn mean_occupancy(&self) -> f64 {
        if self.dynamics.is_empty() {
            return 0.0;
        }
        self.dynamics.iter().map(|d| d.occupancy).sum::<f64>() / self.dynamics.len() as f64
    }

    fn check_rows(&self, network: &RoadNetwork) -> Result<(), NetworkError> {
        if self.dynamics.len() != network.num_edges() || self.selected.len() != network.num_edges() {
            return Err(NetworkError::MissingDynamics {
                expected: network.num_edges(),
                got: self.dynamics.len().min(self.selected.len()),
            });
        }
        Ok(())
    }
}

/// Per-edge road environment vector `h = (road type, lanes, complexity, traffic)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvironmentVector {
    pub road_type: RoadType,
    pub lanes: LaneClass,
    pub complexity: Complexity,
    pub traffic: TrafficCondition,
}

/// Default occupancy at which traffic counts as high.
pub const DEFAULT_CONGESTION_THRESHOLD: f64 = 0.5;

pub fn traffic_condition(occupancy: f64, threshold: f64) -> TrafficCondition {
    if occupancy >= threshold {
        TrafficCondition::High
    } else {
        TrafficCondition::Low
    }
}

pub fn environment_vector(
    network: &RoadNetwork,
    state: &NetworkState,
    edge: EdgeId,
    congestion_threshold: f64,
) -> Result<EnvironmentVector, NetworkError> {
    let e = network.edge_checked(edge)?;
    let dyn_ = state
        .dynamics
        .get(edge.0)
        .ok_or_else(|| NetworkError::UnknownEdge(edge.to_string()))?;
    Ok(EnvironmentVector {
        road_type: e.road_type,
        lanes: LaneClass::from_lanes(e.lanes),
        complexity: network.edge_complexity(edge),
        traffic: traffic_condition(dyn_.occupancy, congestion_threshold),
    })
}

/// Dense row-major feature matrix, one row per edge in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Column positions in the encoded state.
pub mod col {
    pub const OCCUPANCY: usize = 0;
    pub const USAGE: usize = 1;
    pub const SPEED: usize = 2;
    pub const TRAVEL_TIME: usize = 3;
    pub const LANES: usize = 4;
    pub const LENGTH: usize = 5;
    pub const ROAD_TYPE: usize = 6;
    pub const COMPLEXITY: usize = 9;
    pub const FUTURE_USAGE: usize = 11;
    pub const SELECTED: usize = 12;
}

/// Encodes a state as `[ρ, U, U̇, ξ, ψ, χ, ζ(3), ν(2), F, selected]`, every entry in [0, 1].
pub fn encode_state(network: &RoadNetwork, state: &NetworkState) -> Result<FeatureMatrix, NetworkError> {
    state.check_rows(network)?;
    let b = network.feature_bounds();
    let mut data = Vec::with_capacity(network.num_edges() * FEATURE_COUNT);
    for (i, e) in network.edges.iter().enumerate() {
        let d = &state.dynamics[i];
        let cap = e.jam_capacity();
        data.push(d.occupancy.clamp(0.0, 1.0));
        data.push((d.usage / cap).clamp(0.0, 1.0));
        data.push((d.mean_speed / b.max_speed).clamp(0.0, 1.0));
        data.push(min_max(d.travel_time, b.min_time, b.max_time));
        data.push(min_max(e.lanes as f64, b.min_lanes as f64, b.max_lanes as f64));
        data.push(min_max(e.length, b.min_length, b.max_length));
        for rt in RoadType::ALL {
            data.push(if e.road_type == rt { 1.0 } else { 0.0 });
        }
        let cx = network.edge_complexity(EdgeId(i));
        for c in Complexity::ALL {
            data.push(if cx == c { 1.0 } else { 0.0 });
        }
        data.push((d.future_usage / cap).clamp(0.0, 1.0));
        data.push(if state.selected[i] { 1.0 } else { 0.0 });
    }
    Ok(FeatureMatrix {
        rows: network.num_edges(),
        cols: FEATURE_COUNT,
        data,
    })
}

/// Counts of edges per lane class, handy for scenario summaries.
pub fn lane_histogram(network: &RoadNetwork) -> BTreeMap<LaneClass, usize> {
    let mut out = BTreeMap::new();
    for e in &network.edges {
        *out.entry(LaneClass::from_lanes(e.lanes)).or_insert(0) += 1;
    }
    out
}
