//! Model registry, per-driver model selection, route planning and re-planning.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dqn::{argmax, candidate_q_values};
use crate::driver::{Behavior, PreferenceVector};
use crate::gnn::{GnnError, GnnParams};
use crate::network::{encode_state, EdgeId, NetworkError, NetworkState, RoadNetwork};
use crate::paths::{self, k_candidate_paths, PathError};
use crate::rewards::cosine;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("model registry is empty")]
    EmptyRegistry,
    #[error("registry has no generic model")]
    NoGenericModel,
    #[error("duplicate model id {0}")]
    DuplicateId(String),
    #[error("trip is not active")]
    TripNotActive,
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub id: String,
    pub params: GnnParams,
    /// `None` marks a generic model
    pub preference: Option<PreferenceVector>,
}

/// Trained models keyed by id, kept sorted by id.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    entries: Vec<RegistryEntry>,
}

impl ModelRegistry {
    pub fn new(mut entries: Vec<RegistryEntry>) -> Result<Self, ServiceError> {
        if entries.is_empty() {
            return Err(ServiceError::EmptyRegistry);
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(ServiceError::DuplicateId(w[0].id.clone()));
        }
        if !entries.iter().any(|e| e.preference.is_none()) {
            return Err(ServiceError::NoGenericModel);
        }
        Ok(Self { entries })
    }

    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self, ServiceError> {
        let entries = checkpoints
            .iter()
            .map(|c| Ok(RegistryEntry { id: c.id.clone(), params: c.params()?, preference: c.preference }))
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Self::new(entries)
    }

    /// Loads every `*.json` checkpoint in a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, ServiceError> {
        let read = std::fs::read_dir(dir).map_err(|e| ServiceError::Io(format!("{}: {e}", dir.display())))?;
        let mut files: Vec<_> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut checkpoints = Vec::new();
        for path in files {
            let text = std::fs::read_to_string(&path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
            // other JSON outputs (summaries, eval tables) may share the directory
            let tagged = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(|f| f == crate::checkpoint::FORMAT))
                .unwrap_or(false);
            if tagged {
                checkpoints.push(Checkpoint::from_json(&text)?);
            }
        }
        if checkpoints.is_empty() {
            return Err(ServiceError::EmptyRegistry);
        }
        Self::from_checkpoints(&checkpoints)
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// The generic model with the smallest id.
    pub fn generic(&self) -> &RegistryEntry {
        self.entries.iter().find(|e| e.preference.is_none()).expect("registry invariant")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub k: usize,
    pub match_floor: f64,
    pub delay_factor: f64,
    pub behavior_window: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { k: 4, match_floor: 0.5, delay_factor: 1.5, behavior_window: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelChoice {
    pub id: String,
    /// cosine score of the chosen preference model; `None` for the generic model
    pub score: Option<f64>,
}

/// Picks the preference model closest to `p` by cosine similarity, or the
/// generic model when `p` is absent or no model scores at least `match_floor`.
pub fn select_model(
    registry: &ModelRegistry,
    p: Option<&PreferenceVector>,
    match_floor: f64,
) -> Result<ModelChoice, ServiceError> {
    let generic = ModelChoice { id: registry.generic().id.clone(), score: None };
    let Some(p) = p else {
        return Ok(generic);
    };
    let target = p.encode();
    let mut best: Option<(f64, &str)> = None;
    for e in registry.entries() {
        if let Some(q) = &e.preference {
            let s = cosine(&target, &q.encode());
            // entries are sorted by id, so strict > keeps the smallest id on ties
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, &e.id));
            }
        }
    }
    match best {
        Some((s, id)) if s >= match_floor => Ok(ModelChoice { id: id.to_string(), score: Some(s) }),
        _ => Ok(generic),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub driver: String,
    pub source: String,
    pub destination: String,
    pub preference: Option<PreferenceVector>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRoute {
    pub route: Vec<EdgeId>,
    pub model: ModelChoice,
    pub ideal_time: f64,
    pub predicted_time: f64,
    pub candidates: usize,
}

/// Greedy route choice among the K current candidates under the selected model.
pub fn plan_route(
    registry: &ModelRegistry,
    network: &RoadNetwork,
    state: &NetworkState,
    request: &RouteRequest,
    config: &ServiceConfig,
) -> Result<PlannedRoute, ServiceError> {
    let s = network.junction_index(&request.source)?;
    let d = network.junction_index(&request.destination)?;
    plan_between(registry, network, state, s, d, request.preference.as_ref(), config)
}

fn plan_between(
    registry: &ModelRegistry,
    network: &RoadNetwork,
    state: &NetworkState,
    source: usize,
    destination: usize,
    preference: Option<&PreferenceVector>,
    config: &ServiceConfig,
) -> Result<PlannedRoute, ServiceError> {
    let model = select_model(registry, preference, config.match_floor)?;
    let entry = registry.get(&model.id).expect("selected id exists");
    let cands = k_candidate_paths(network, state, source, destination, config.k)?;
    let action = if cands.len() == 1 {
        0
    } else {
        let base = encode_state(network, state)?;
        let q = candidate_q_values(&entry.params, &network.topology(), &base, &cands.routes)?;
        argmax(&q).unwrap_or(0)
    };
    let route = cands.routes[action].clone();
    Ok(PlannedRoute {
        ideal_time: paths::ideal_time(network, &route)?,
        predicted_time: paths::estimated_time(network, state, &route)?,
        candidates: cands.len(),
        route,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplanReason {
    Deviation,
    Behavior,
    Delay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplanDecision {
    Keep,
    Replan(ReplanReason),
}

/// Where the vehicle is right now.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LivePosition {
    pub edge: EdgeId,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveTrip {
    pub request: RouteRequest,
    pub route: Vec<EdgeId>,
    pub model: String,
    pub ideal_time: f64,
    pub predicted_time: f64,
    pub assigned_at: f64,
    pub position: Option<LivePosition>,
    behavior: VecDeque<Behavior>,
    pub active: bool,
}

impl ActiveTrip {
    pub fn new(request: RouteRequest, planned: &PlannedRoute, assigned_at: f64) -> Self {
        Self {
            request,
            route: planned.route.clone(),
            model: planned.model.id.clone(),
            ideal_time: planned.ideal_time,
            predicted_time: planned.predicted_time,
            assigned_at,
            position: None,
            behavior: VecDeque::new(),
            active: true,
        }
    }

    /// Appends per-traversal labels, keeping the last `window`.
    pub fn observe(&mut self, labels: &[Behavior], window: usize) {
        for l in labels {
            self.behavior.push_back(*l);
            while self.behavior.len() > window {
                self.behavior.pop_front();
            }
        }
    }

    pub fn behavior(&self) -> impl Iterator<Item = &Behavior> {
        self.behavior.iter()
    }

    /// Elapsed time plus current travel time over the rest of the route.
    pub fn predicted_arrival(&self, state: &NetworkState, position: &LivePosition) -> f64 {
        let elapsed = position.time - self.assigned_at;
        let rest = match self.route.iter().position(|e| *e == position.edge) {
            Some(i) => self.route[i..].iter().map(|e| state.dynamics[e.0].travel_time).sum(),
            None => 0.0,
        };
        elapsed + rest
    }
}

/// Re-planning triggers: off-route position, mostly aggressive recent driving
/// for a preference-backed trip, or a predicted arrival beyond
/// `delay_factor` times the ideal time. Checked in that order.
pub fn check_replan(
    trip: &mut ActiveTrip,
    state: &NetworkState,
    position: LivePosition,
    labels: &[Behavior],
    config: &ServiceConfig,
) -> Result<ReplanDecision, ServiceError> {
    if !trip.active {
        return Err(ServiceError::TripNotActive);
    }
    trip.position = Some(position);
    trip.observe(labels, config.behavior_window);
    if !trip.route.contains(&position.edge) {
        return Ok(ReplanDecision::Replan(ReplanReason::Deviation));
    }
    if trip.request.preference.is_some() {
        let aggressive = trip.behavior.iter().filter(|b| **b == Behavior::Aggressive).count();
        if 2 * aggressive > trip.behavior.len() {
            return Ok(ReplanDecision::Replan(ReplanReason::Behavior));
        }
    }
    if trip.predicted_arrival(state, &position) > config.delay_factor * trip.ideal_time {
        return Ok(ReplanDecision::Replan(ReplanReason::Delay));
    }
    Ok(ReplanDecision::Keep)
}

/// New plan from the junction ahead of the vehicle. `None` when that junction
/// is already the destination.
pub fn replan(
    registry: &ModelRegistry,
    network: &RoadNetwork,
    state: &NetworkState,
    trip: &mut ActiveTrip,
    config: &ServiceConfig,
) -> Result<Option<PlannedRoute>, ServiceError> {
    if !trip.active {
        return Err(ServiceError::TripNotActive);
    }
    let position = trip.position.ok_or(ServiceError::TripNotActive)?;
    let next = network.endpoints(position.edge).1;
    let destination = network.junction_index(&trip.request.destination)?;
    if next == destination {
        return Ok(None);
    }
    let planned = plan_between(registry, network, state, next, destination, trip.request.preference.as_ref(), config)?;
    trip.route = planned.route.clone();
    trip.model = planned.model.id.clone();
    trip.ideal_time = planned.ideal_time;
    trip.predicted_time = planned.predicted_time;
    trip.assigned_at = position.time;
    Ok(Some(planned))
}

/// Route as distinct junction ids, for loop checks and display.
pub fn junction_path(network: &RoadNetwork, route: &[EdgeId]) -> Vec<String> {
    let mut out = Vec::with_capacity(route.len() + 1);
    if let Some(first) = route.first() {
        out.push(network.junction(network.endpoints(*first).0).id.clone());
    }
    out.extend(route.iter().map(|e| network.junction(network.endpoints(*e).1).id.clone()));
    out
}

pub fn is_simple(network: &RoadNetwork, route: &[EdgeId]) -> bool {
    let path = junction_path(network, route);
    path.iter().collect::<HashSet<_>>().len() == path.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::PriorityMask;
    use crate::gnn::{init, GnnConfig};
    use crate::network::{Complexity, LaneClass, RoadType, TrafficCondition};
    use crate::scenarios;

    fn params(seed: u64) -> GnnParams {
        init(&GnnConfig { hidden: 4, layers: 1, seed, ..Default::default() }).unwrap()
    }

    fn registry() -> ModelRegistry {
        ModelRegistry::new(vec![
            RegistryEntry { id: "generic".into(), params: params(0), preference: None },
            RegistryEntry {
                id: "dpm-v1".into(),
                params: params(1),
                preference: Some(PreferenceVector::two_lane_driver()),
            },
            RegistryEntry {
                id: "dpm-v2".into(),
                params: params(2),
                preference: Some(PreferenceVector::one_lane_driver()),
            },
        ])
        .unwrap()
    }

    fn request(s: &str, d: &str, p: Option<PreferenceVector>) -> RouteRequest {
        RouteRequest { driver: "d1".into(), source: s.into(), destination: d.into(), preference: p, t: 0.0 }
    }

    #[test]
    fn registry_invariants() {
        assert!(matches!(ModelRegistry::new(vec![]), Err(ServiceError::EmptyRegistry)));
        let only_pref =
            vec![RegistryEntry { id: "a".into(), params: params(0), preference: Some(PreferenceVector::two_lane_driver()) }];
        assert!(matches!(ModelRegistry::new(only_pref), Err(ServiceError::NoGenericModel)));
        let dup = vec![
            RegistryEntry { id: "g".into(), params: params(0), preference: None },
            RegistryEntry { id: "g".into(), params: params(1), preference: None },
        ];
        assert!(matches!(ModelRegistry::new(dup), Err(ServiceError::DuplicateId(_))));
    }

    #[test]
    fn model_selection() {
        let r = registry();
        assert_eq!(select_model(&r, None, 0.5).unwrap(), ModelChoice { id: "generic".into(), score: None });
        let v1 = select_model(&r, Some(&PreferenceVector::two_lane_driver()), 0.5).unwrap();
        assert_eq!(v1.id, "dpm-v1");
        assert_eq!(v1.score, Some(1.0));
        assert_eq!(select_model(&r, Some(&PreferenceVector::one_lane_driver()), 0.5).unwrap().id, "dpm-v2");
        let far = PreferenceVector {
            road_type: RoadType::Curved,
            lanes: LaneClass::ThreePlus,
            complexity: Complexity::Complex,
            traffic: TrafficCondition::High,
            priority: PriorityMask::default(),
        };
        assert_eq!(select_model(&r, Some(&far), 0.5).unwrap().id, "generic");
        // three of four attributes shared with both: cosine 0.75, tie broken by id
        let between = PreferenceVector { lanes: LaneClass::ThreePlus, ..PreferenceVector::two_lane_driver() };
        let c = select_model(&r, Some(&between), 0.5).unwrap();
        assert_eq!((c.id.as_str(), c.score), ("dpm-v1", Some(0.75)));
    }

    #[test]
    fn single_route_is_returned() {
        let net = scenarios::grid4x4();
        let state = net.free_flow_state();
        // a corner pair connected by exactly one two-edge route plus longer detours;
        // with k = 1 the only candidate must come back
        let cfg = ServiceConfig { k: 1, ..Default::default() };
        let p = plan_route(&registry(), &net, &state, &request("J00", "J01", None), &cfg).unwrap();
        assert_eq!(p.route, vec![net.edge_by_key("J00->J01").unwrap()]);
        assert_eq!(p.candidates, 1);
        assert!((p.ideal_time - 100.0 / 13.89).abs() < 1e-9);
    }

    #[test]
    fn plans_are_simple_and_connected() {
        let net = scenarios::grid4x4();
        let state = net.free_flow_state();
        let r = registry();
        for (s, d) in [("J00", "J33"), ("J30", "J03"), ("J12", "J21")] {
            let p = plan_route(&r, &net, &state, &request(s, d, None), &ServiceConfig::default()).unwrap();
            crate::sim::check_connected(&net, &p.route).unwrap();
            assert!(is_simple(&net, &p.route));
            let path = junction_path(&net, &p.route);
            assert_eq!((path[0].as_str(), path.last().unwrap().as_str()), (s, d));
        }
        assert!(matches!(
            plan_route(&r, &net, &state, &request("J00", "J00", None), &ServiceConfig::default()),
            Err(ServiceError::Path(PathError::SameEndpoints(_)))
        ));
    }

    fn trip(net: &RoadNetwork, preference: Option<PreferenceVector>) -> ActiveTrip {
        let state = net.free_flow_state();
        let p = plan_route(&registry(), net, &state, &request("J00", "J03", preference), &ServiceConfig { k: 1, ..Default::default() })
            .unwrap();
        ActiveTrip::new(request("J00", "J03", preference), &p, 0.0)
    }

    #[test]
    fn replan_triggers() {
        let net = scenarios::grid4x4();
        let state = net.free_flow_state();
        let cfg = ServiceConfig::default();
        let first = net.edge_by_key("J00->J01").unwrap();

        let mut t = trip(&net, Some(PreferenceVector::two_lane_driver()));
        let on_time = LivePosition { edge: first, time: 0.0 };
        assert_eq!(check_replan(&mut t, &state, on_time, &[Behavior::Normal], &cfg).unwrap(), ReplanDecision::Keep);

        let off = LivePosition { edge: net.edge_by_key("J00->J10").unwrap(), time: 1.0 };
        assert_eq!(
            check_replan(&mut t, &state, off, &[], &cfg).unwrap(),
            ReplanDecision::Replan(ReplanReason::Deviation)
        );

        let mut t = trip(&net, Some(PreferenceVector::two_lane_driver()));
        use Behavior::*;
        let labels = [Aggressive, Normal, Aggressive, Aggressive, Aggressive];
        assert_eq!(
            check_replan(&mut t, &state, on_time, &labels, &cfg).unwrap(),
            ReplanDecision::Replan(ReplanReason::Behavior)
        );
        // only the last five count: two more normals still leave 3 of 5 aggressive, a third leaves 2
        assert_eq!(
            check_replan(&mut t, &state, on_time, &[Normal, Normal], &cfg).unwrap(),
            ReplanDecision::Replan(ReplanReason::Behavior)
        );
        assert_eq!(check_replan(&mut t, &state, on_time, &[Normal], &cfg).unwrap(), ReplanDecision::Keep);

        // the whole route lies ahead at free flow, so elapsed time alone sets the ratio
        let mut t = trip(&net, None);
        let ti = t.ideal_time;
        let late = LivePosition { edge: first, time: 0.6 * ti };
        assert_eq!(
            check_replan(&mut t, &state, late, &[], &cfg).unwrap(),
            ReplanDecision::Replan(ReplanReason::Delay)
        );
        let fine = LivePosition { edge: first, time: 0.4 * ti };
        assert_eq!(check_replan(&mut t, &state, fine, &[], &cfg).unwrap(), ReplanDecision::Keep);

        t.active = false;
        assert!(matches!(check_replan(&mut t, &state, fine, &[], &cfg), Err(ServiceError::TripNotActive)));
    }

    #[test]
    fn replanning_continues_from_next_junction() {
        let net = scenarios::grid4x4();
        let state = net.free_flow_state();
        let r = registry();
        let mut t = trip(&net, None);
        let off = net.edge_by_key("J00->J10").unwrap();
        check_replan(&mut t, &state, LivePosition { edge: off, time: 5.0 }, &[], &ServiceConfig::default()).unwrap();
        let p = replan(&r, &net, &state, &mut t, &ServiceConfig::default()).unwrap().unwrap();
        assert_eq!(junction_path(&net, &p.route)[0], "J10");
        assert_eq!(t.route, p.route);
        assert_eq!(t.assigned_at, 5.0);
    }
}
