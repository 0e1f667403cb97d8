//! Browser demo: candidate routes, a reward explorer and a traffic run on the
//! bundled scenarios. Every export takes plain values and returns JSON text.

use pcroute::driver::PreferenceVector;
use pcroute::experiment::{random_demand, run_demand};
use pcroute::network::RoadNetwork;
use pcroute::paths;
use pcroute::rewards::{self, AttributeWeights, RewardBreakdown, RewardWeights};
use pcroute::scenarios::Scenario;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CONGESTION_THRESHOLD: f64 = 0.5;

fn scenario(name: &str) -> Result<Scenario, String> {
    Scenario::builtin(name).ok_or_else(|| format!("unknown scenario {name}"))
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("demo output serializes")
}

#[derive(Serialize)]
struct Layout {
    junctions: Vec<JunctionView>,
    edges: Vec<EdgeView>,
}

#[derive(Serialize)]
struct JunctionView {
    id: String,
    x: f64,
    y: f64,
    signal: bool,
}

#[derive(Serialize)]
struct EdgeView {
    key: String,
    from: usize,
    to: usize,
    lanes: u32,
    road_type: String,
}

fn layout(network: &RoadNetwork) -> Layout {
    let junctions = network
        .junctions()
        .iter()
        .map(|j| JunctionView { id: j.id.clone(), x: j.x, y: j.y, signal: j.traffic_light })
        .collect();
    let edges = (0..network.num_edges())
        .map(|i| {
            let id = pcroute::network::EdgeId(i);
            let (from, to) = network.endpoints(id);
            let e = network.edge(id);
            EdgeView { key: network.edge_key(id), from, to, lanes: e.lanes, road_type: format!("{:?}", e.road_type).to_lowercase() }
        })
        .collect();
    Layout { junctions, edges }
}

pub fn network_json(name: &str) -> Result<String, String> {
    Ok(json(&layout(&scenario(name)?.network)))
}

#[derive(Debug, Serialize)]
pub struct RouteView {
    pub edges: Vec<usize>,
    pub junctions: Vec<String>,
    pub ranking_cost: f64,
    pub ideal_time: f64,
    pub satisfaction: Option<f64>,
    pub alignment: Option<f64>,
}

/// Up to `k` free-flow candidate routes, with preference statistics when a
/// preference label such as `straight,two,simple,low` is given.
pub fn candidates(name: &str, source: &str, destination: &str, k: usize, preference: &str) -> Result<Vec<RouteView>, String> {
    let s = scenario(name)?;
    let net = &s.network;
    let src = net.junction_index(source).map_err(|e| e.to_string())?;
    let dst = net.junction_index(destination).map_err(|e| e.to_string())?;
    let pref = match preference.trim() {
        "" => None,
        p => Some(PreferenceVector::parse(p).map_err(|e| e.to_string())?),
    };
    let state = net.free_flow_state();
    let set = paths::k_candidate_paths(net, &state, src, dst, k).map_err(|e| e.to_string())?;
    set.routes
        .iter()
        .zip(&set.costs)
        .map(|(route, cost)| {
            let sims = pref
                .as_ref()
                .map(|p| rewards::route_similarities(net, &state, route, p, &AttributeWeights::default(), CONGESTION_THRESHOLD))
                .transpose()
                .map_err(|e| e.to_string())?;
            let mut junctions = vec![net.junction(src).id.clone()];
            junctions.extend(route.iter().map(|&e| net.junction(net.endpoints(e).1).id.clone()));
            Ok(RouteView {
                edges: route.iter().map(|e| e.0).collect(),
                junctions,
                ranking_cost: *cost,
                ideal_time: paths::ideal_time(net, route).map_err(|e| e.to_string())?,
                satisfaction: sims.as_ref().map(|s| s.iter().sum::<f64>() / s.len() as f64),
                alignment: sims.as_deref().map(rewards::alignment_fraction),
            })
        })
        .collect()
}

/// Reward for one trip given its components and the objective weights.
pub fn reward(ideal: f64, actual: f64, mean_occupancy: f64, satisfaction: f64, weights: [f64; 3]) -> Result<RewardBreakdown, String> {
    let w = RewardWeights::new(weights[0], weights[1], weights[2]).map_err(|e| e.to_string())?;
    let time = rewards::time_reward(ideal, actual).map_err(|e| e.to_string())?;
    if !(0.0..=1.0).contains(&mean_occupancy) || !(0.0..=1.0).contains(&satisfaction) {
        return Err("occupancy and satisfaction must lie in [0, 1]".into());
    }
    Ok(RewardBreakdown::combine(satisfaction, time, 1.0 - mean_occupancy, &w))
}

#[wasm_bindgen]
pub fn network(name: &str) -> Result<String, JsValue> {
    network_json(name).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn candidate_routes(name: &str, source: &str, destination: &str, k: usize, preference: &str) -> Result<String, JsValue> {
    candidates(name, source, destination, k, preference).map(|r| json(&r)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn explore_reward(ideal: f64, actual: f64, mean_occupancy: f64, satisfaction: f64, w_pref: f64, w_time: f64, w_flow: f64) -> Result<String, JsValue> {
    reward(ideal, actual, mean_occupancy, satisfaction, [w_pref, w_time, w_flow])
        .map(|r| json(&r))
        .map_err(|e| JsValue::from_str(&e))
}

/// Random demand for `seconds` at `rate` departures per second.
pub fn simulate_json(name: &str, seed: u64, seconds: f64, rate: f64) -> Result<String, String> {
    if !((0.0..=5.0).contains(&rate) && seconds > 0.0 && seconds <= 3600.0) {
        return Err("rate must be in [0, 5] and duration in (0, 3600]".into());
    }
    let s = scenario(name)?;
    let demand = random_demand(&s.network, seconds, rate, seed);
    let run = run_demand(&s, &demand, seconds, 1800.0).map_err(|e| e.to_string())?;
    Ok(json(&run))
}

#[wasm_bindgen]
pub fn simulate(name: &str, seed: u32, seconds: f64, rate: f64) -> Result<String, JsValue> {
    simulate_json(name, u64::from(seed), seconds, rate).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_lists_every_edge() {
        let v: serde_json::Value = serde_json::from_str(&network_json("grid4x4").unwrap()).unwrap();
        assert_eq!(v["junctions"].as_array().unwrap().len(), 16);
        assert_eq!(v["edges"].as_array().unwrap().len(), 48);
        assert!(network_json("nowhere").is_err());
    }

    #[test]
    fn candidates_are_ordered_and_scored() {
        let routes = candidates("twolane-vs-onelane", "J00", "J44", 4, "straight,two,simple,low").unwrap();
        assert_eq!(routes.len(), 4);
        assert!(routes.windows(2).all(|w| w[0].ranking_cost <= w[1].ranking_cost));
        assert!(routes.iter().all(|r| r.alignment.is_some_and(|a| (0.0..=1.0).contains(&a))));
        let plain = candidates("grid4x4", "J00", "J33", 2, "").unwrap();
        assert!(plain.iter().all(|r| r.alignment.is_none()));
        assert!(candidates("grid4x4", "J00", "J00", 2, "").is_err());
    }

    #[test]
    fn reward_explorer_matches_components() {
        let r = reward(60.0, 60.0, 0.25, 0.5, [0.2, 0.5, 0.3]).unwrap();
        assert_eq!(r.time, 1.0);
        assert!((r.flow - 0.75).abs() < 1e-12);
        assert!((r.total - (0.2 * 0.5 + 0.5 + 0.3 * 0.75)).abs() < 1e-12);
        assert!(reward(60.0, 60.0, 0.25, 0.5, [0.5, 0.5, 0.5]).is_err());
        assert!(reward(0.0, 60.0, 0.25, 0.5, [0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn simulation_drains() {
        let v: serde_json::Value = serde_json::from_str(&simulate_json("grid4x4", 3, 60.0, 0.5).unwrap()).unwrap();
        assert_eq!(v["summary"]["vehicles"], v["summary"]["arrived"]);
        assert_eq!(v["edge_peak"].as_array().unwrap().len(), 48);
        assert!(simulate_json("grid4x4", 3, 60.0, 50.0).is_err());
    }
}
