//! K candidate routes (the agent's action space), route timing and the
//! selected-path indicator.
//!
//! Candidates are the K cheapest loopless paths found with Yen's algorithm.
//! Ties are broken by the lexicographic order of the edge-id sequence, which
//! requires every spur search to return the lexicographically smallest
//! shortest path; see [`lex_min_shortest_path`].

use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{EdgeId, NetworkError, NetworkState, RoadNetwork};
use crate::sim::{check_connected, SimError};

#[derive(Debug, Error)]
pub enum PathError {
    #[error("no path from {0} to {1}")]
    NoPath(String, String),
    #[error("source and destination are both {0}")]
    SameEndpoints(String),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("route is empty")]
    EmptyRoute,
    #[error("route is disconnected between {0} and {1}")]
    DisconnectedRoute(EdgeId, EdgeId),
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<SimError> for PathError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::DisconnectedRoute(a, b) => PathError::DisconnectedRoute(a, b),
            SimError::UnknownEdge(e) => PathError::UnknownEdge(e),
            SimError::EmptyRoute => PathError::EmptyRoute,
            SimError::Network(n) => PathError::Network(n),
            other => PathError::Network(NetworkError::Value(other.to_string())),
        }
    }
}

/// The K cheapest routes for one origin-destination pair, cheapest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRouteSet {
    pub source: usize,
    pub destination: usize,
    pub routes: Vec<Vec<EdgeId>>,
    pub costs: Vec<f64>,
}

impl CandidateRouteSet {
    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }
}

/// Sum of edge weights, accumulated from the first edge onwards.
pub fn path_cost(route: &[EdgeId], weight: impl Fn(EdgeId) -> f64) -> f64 {
    route.iter().fold(0.0, |acc, &e| acc + weight(e))
}

#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Lexicographically smallest minimum-cost path from `from` to `to`, avoiding
/// banned junctions and edges. Weights must be strictly positive.
///
/// Distances to the target are computed with a reverse Dijkstra; the path is
/// then walked forward, always taking the lowest-id edge that stays on a
/// shortest path.
pub fn lex_min_shortest_path(
    network: &RoadNetwork,
    from: usize,
    to: usize,
    weight: &impl Fn(EdgeId) -> f64,
    banned_nodes: &[bool],
    banned_edges: &HashSet<EdgeId>,
) -> Option<Vec<EdgeId>> {
    let n = network.num_junctions();
    if banned_nodes[from] || banned_nodes[to] {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[to] = 0.0;
    heap.push(HeapEntry(0.0, to));
    while let Some(HeapEntry(d, v)) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        if v == from {
            break;
        }
        for &e in network.incoming(v) {
            if banned_edges.contains(&e) {
                continue;
            }
            let u = network.endpoints(e).0;
            if banned_nodes[u] || done[u] {
                continue;
            }
            let cand = weight(e) + d;
            if cand < dist[u] {
                dist[u] = cand;
                heap.push(HeapEntry(cand, u));
            }
        }
    }
    if !dist[from].is_finite() {
        return None;
    }
    let mut path = Vec::new();
    let mut at = from;
    let mut visited = vec![false; n];
    visited[from] = true;
    while at != to {
        let next = network
            .outgoing(at)
            .iter()
            .copied()
            .filter(|e| !banned_edges.contains(e))
            .filter(|&e| {
                let v = network.endpoints(e).1;
                !banned_nodes[v] && !visited[v] && done[v] && weight(e) + dist[v] == dist[at]
            })
            .min()?;
        path.push(next);
        at = network.endpoints(next).1;
        visited[at] = true;
    }
    Some(path)
}

/// Shortest path under an arbitrary positive edge weight (Dijkstra).
pub fn shortest_path_by(
    network: &RoadNetwork,
    source: usize,
    destination: usize,
    weight: impl Fn(EdgeId) -> f64,
) -> Option<Vec<EdgeId>> {
    if source == destination {
        return Some(Vec::new());
    }
    let banned = vec![false; network.num_junctions()];
    lex_min_shortest_path(network, source, destination, &weight, &banned, &HashSet::new())
}

fn junction_sequence(network: &RoadNetwork, source: usize, route: &[EdgeId]) -> Vec<usize> {
    let mut nodes = Vec::with_capacity(route.len() + 1);
    nodes.push(source);
    nodes.extend(route.iter().map(|&e| network.endpoints(e).1));
    nodes
}

fn compare_paths(a: &(f64, Vec<EdgeId>), b: &(f64, Vec<EdgeId>)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

/// Yen's K shortest loopless paths under `weight`, ordered by (cost, edge-id sequence).
pub fn k_shortest_paths(
    network: &RoadNetwork,
    source: usize,
    destination: usize,
    k: usize,
    weight: impl Fn(EdgeId) -> f64,
) -> Vec<(Vec<EdgeId>, f64)> {
    let n = network.num_junctions();
    let no_nodes = vec![false; n];
    let Some(first) = lex_min_shortest_path(network, source, destination, &weight, &no_nodes, &HashSet::new())
    else {
        return Vec::new();
    };
    let mut accepted: Vec<(f64, Vec<EdgeId>)> = vec![(path_cost(&first, &weight), first)];
    let mut pool: Vec<(f64, Vec<EdgeId>)> = Vec::new();
    let mut seen: HashSet<Vec<EdgeId>> = HashSet::new();
    seen.insert(accepted[0].1.clone());

    while accepted.len() < k {
        let prev = accepted.last().unwrap().1.clone();
        let nodes = junction_sequence(network, source, &prev);
        for i in 0..prev.len() {
            let spur = nodes[i];
            let root = &prev[..i];
            let mut banned_edges = HashSet::new();
            for (_, p) in &accepted {
                if p.len() > i && &p[..i] == root {
                    banned_edges.insert(p[i]);
                }
            }
            let mut banned_nodes = vec![false; n];
            for &v in &nodes[..i] {
                banned_nodes[v] = true;
            }
            if let Some(tail) = lex_min_shortest_path(network, spur, destination, &weight, &banned_nodes, &banned_edges)
            {
                let mut full = root.to_vec();
                full.extend(tail);
                if seen.insert(full.clone()) {
                    pool.push((path_cost(&full, &weight), full));
                }
            }
        }
        let Some(best) = (0..pool.len()).min_by(|&a, &b| compare_paths(&pool[a], &pool[b])) else {
            break;
        };
        accepted.push(pool.swap_remove(best));
    }
    accepted.into_iter().map(|(c, p)| (p, c)).collect()
}

/// Edge weight used to rank candidates: current travel time plus the wait for
/// the downstream signal. The final edge into `destination` carries no signal wait.
pub fn ranking_weight<'a>(
    network: &'a RoadNetwork,
    state: &'a NetworkState,
    destination: usize,
) -> impl Fn(EdgeId) -> f64 + 'a {
    move |e: EdgeId| {
        let d = &state.dynamics[e.0];
        if network.endpoints(e).1 == destination {
            d.travel_time
        } else {
            d.travel_time + d.signal_wait
        }
    }
}

pub fn k_candidate_paths(
    network: &RoadNetwork,
    state: &NetworkState,
    source: usize,
    destination: usize,
    k: usize,
) -> Result<CandidateRouteSet, PathError> {
    if k == 0 {
        return Err(PathError::InvalidK);
    }
    if source >= network.num_junctions() || destination >= network.num_junctions() {
        return Err(PathError::Network(NetworkError::UnknownJunction(format!("#{}", source.max(destination)))));
    }
    if source == destination {
        return Err(PathError::SameEndpoints(network.junction(source).id.clone()));
    }
    if state.dynamics.len() != network.num_edges() {
        return Err(NetworkError::MissingDynamics { expected: network.num_edges(), got: state.dynamics.len() }.into());
    }
    let found = k_shortest_paths(network, source, destination, k, ranking_weight(network, state, destination));
    if found.is_empty() {
        return Err(PathError::NoPath(
            network.junction(source).id.clone(),
            network.junction(destination).id.clone(),
        ));
    }
    let (routes, costs) = found.into_iter().unzip();
    Ok(CandidateRouteSet { source, destination, routes, costs })
}

fn check_route(network: &RoadNetwork, route: &[EdgeId]) -> Result<(), PathError> {
    if route.is_empty() {
        return Err(PathError::EmptyRoute);
    }
    check_connected(network, route)?;
    Ok(())
}

/// Free-flow time along a route: length over speed limit, no junction or signal delay.
pub fn ideal_time(network: &RoadNetwork, route: &[EdgeId]) -> Result<f64, PathError> {
    check_route(network, route)?;
    Ok(path_cost(route, |e| network.edge(e).free_flow_time()))
}

/// Time along a route at the current mean edge speeds.
pub fn actual_time(network: &RoadNetwork, state: &NetworkState, route: &[EdgeId]) -> Result<f64, PathError> {
    check_route(network, route)?;
    Ok(path_cost(route, |e| state.dynamics[e.0].travel_time))
}

/// Current travel time plus waits at intermediate signals; the candidate ranking cost.
pub fn estimated_time(network: &RoadNetwork, state: &NetworkState, route: &[EdgeId]) -> Result<f64, PathError> {
    check_route(network, route)?;
    let last = *route.last().unwrap();
    let destination = network.endpoints(last).1;
    Ok(path_cost(route, ranking_weight(network, state, destination)))
}

/// Copy of `state` with the selected-path indicator set exactly on `route`.
pub fn mark_selected_path(state: &NetworkState, route: &[EdgeId]) -> Result<NetworkState, PathError> {
    let mut out = state.clone();
    out.selected.iter_mut().for_each(|s| *s = false);
    for &e in route {
        *out.selected.get_mut(e.0).ok_or(PathError::UnknownEdge(e))? = true;
    }
    Ok(out)
}
