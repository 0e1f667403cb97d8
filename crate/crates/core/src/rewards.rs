//! Reward components: driver satisfaction, time to destination, global flow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{encode_attributes, PreferenceVector, BLOCKS, ENCODED_LEN};
use crate::network::{environment_vector, EdgeId, EnvironmentVector, NetworkError, NetworkState, RoadNetwork};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("route is empty")]
    EmptyRoute,
    #[error("times must be positive (ideal {ideal}, actual {actual})")]
    NonPositiveTime { ideal: f64, actual: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Mixing coefficients of the three components; non-negative, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct RewardWeights {
    preference: f64,
    time: f64,
    flow: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    preference: f64,
    time: f64,
    flow: f64,
}

impl TryFrom<RawWeights> for RewardWeights {
    type Error = RewardError;
    fn try_from(r: RawWeights) -> Result<Self, Self::Error> {
        RewardWeights::new(r.preference, r.time, r.flow)
    }
}

impl From<RewardWeights> for RawWeights {
    fn from(w: RewardWeights) -> Self {
        RawWeights { preference: w.preference, time: w.time, flow: w.flow }
    }
}

impl RewardWeights {
    pub fn new(preference: f64, time: f64, flow: f64) -> Result<Self, RewardError> {
        let all = [preference, time, flow];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::InvalidWeights(format!("{all:?} must be non-negative")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidWeights(format!("{all:?} sum to {sum}, not 1")));
        }
        Ok(Self { preference, time, flow })
    }

    /// Time and flow only: the first training phase.
    pub fn generic() -> Self {
        Self { preference: 0.0, time: 0.7, flow: 0.3 }
    }

    /// Satisfaction-weighted mix for the preference training phase.
    pub fn personalized() -> Self {
        Self { preference: 0.6, time: 0.3, flow: 0.1 }
    }

    pub fn preference(&self) -> f64 {
        self.preference
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn flow(&self) -> f64 {
        self.flow
    }
}

/// Per-attribute-block weights for the weighted cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeWeights {
    pub road_type: f64,
    pub lanes: f64,
    pub complexity: f64,
    pub traffic: f64,
}

impl Default for AttributeWeights {
    fn default() -> Self {
        Self { road_type: 0.35, lanes: 0.35, complexity: 0.15, traffic: 0.15 }
    }
}

impl AttributeWeights {
    pub fn uniform() -> Self {
        Self { road_type: 1.0, lanes: 1.0, complexity: 1.0, traffic: 1.0 }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.road_type, self.lanes, self.complexity, self.traffic]
    }
}

/// Plain cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity after scaling each attribute block of both vectors by `sqrt(w)`.
pub fn weighted_cosine(a: &[f64; ENCODED_LEN], b: &[f64; ENCODED_LEN], weights: &AttributeWeights) -> f64 {
    let mut sa = *a;
    let mut sb = *b;
    for (block, w) in BLOCKS.iter().zip(weights.as_array()) {
        let s = w.max(0.0).sqrt();
        for i in block.clone() {
            sa[i] *= s;
            sb[i] *= s;
        }
    }
    cosine(&sa, &sb)
}

/// Similarity terms for one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSimilarity {
    /// weighted cosine `S_c`
    pub cosine: f64,
    /// mean of the priority matches `S_p` (1 when no attribute is prioritized)
    pub priority: f64,
    /// `min(mean(S_p), S_c)`
    pub combined: f64,
}

pub fn edge_similarity(p: &PreferenceVector, h: &EnvironmentVector, weights: &AttributeWeights) -> EdgeSimilarity {
    let cosine = weighted_cosine(&p.encode(), &encode_attributes(h), weights);
    let matches = [
        p.road_type == h.road_type,
        p.lanes == h.lanes,
        p.complexity == h.complexity,
        p.traffic == h.traffic,
    ];
    let flags: Vec<f64> = p
        .priority
        .as_array()
        .iter()
        .zip(matches)
        .filter(|(prio, _)| **prio)
        .map(|(_, m)| if m { 1.0 } else { 0.0 })
        .collect();
    let priority = if flags.is_empty() { 1.0 } else { flags.iter().sum::<f64>() / flags.len() as f64 };
    EdgeSimilarity { cosine, priority, combined: priority.min(cosine).clamp(0.0, 1.0) }
}

/// Per-edge combined similarities along a route.
pub fn route_similarities(
    network: &RoadNetwork,
    state: &NetworkState,
    route: &[EdgeId],
    p: &PreferenceVector,
    weights: &AttributeWeights,
    congestion_threshold: f64,
) -> Result<Vec<f64>, RewardError> {
    route
        .iter()
        .map(|&e| {
            let h = environment_vector(network, state, e, congestion_threshold)?;
            Ok(edge_similarity(p, &h, weights).combined)
        })
        .collect()
}

/// Mean per-edge similarity along the route, in [0, 1].
pub fn satisfaction_reward(
    network: &RoadNetwork,
    state: &NetworkState,
    route: &[EdgeId],
    p: &PreferenceVector,
    weights: &AttributeWeights,
    congestion_threshold: f64,
) -> Result<f64, RewardError> {
    if route.is_empty() {
        return Err(RewardError::EmptyRoute);
    }
    let s = route_similarities(network, state, route, p, weights, congestion_threshold)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Share of route edges whose combined similarity exceeds 0.5.
pub fn alignment_fraction(similarities: &[f64]) -> f64 {
    if similarities.is_empty() {
        return 0.0;
    }
    similarities.iter().filter(|s| **s > 0.5).count() as f64 / similarities.len() as f64
}

/// `1 - erf(|T_a - T_i| / T_i)`: 1 on time, lower for late and early arrival alike.
pub fn time_reward(ideal: f64, actual: f64) -> Result<f64, RewardError> {
    if !(ideal > 0.0 && actual > 0.0) {
        return Err(RewardError::NonPositiveTime { ideal, actual });
    }
    Ok((1.0 - libm::erf((actual - ideal).abs() / ideal)).clamp(0.0, 1.0))
}

/// `1 - mean occupancy` over every edge.
pub fn flow_reward(state: &NetworkState) -> f64 {
    (1.0 - state.mean_occupancy()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub preference: f64,
    pub time: f64,
    pub flow: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn combine(preference: f64, time: f64, flow: f64, weights: &RewardWeights) -> Self {
        let total = weights.preference * preference + weights.time * time + weights.flow * flow;
        Self { preference, time, flow, total }
    }
}

/// Everything needed to score one routed trip.
pub struct RewardInputs<'a> {
    pub network: &'a RoadNetwork,
    /// state at decision time; drives the per-edge traffic condition
    pub decision_state: &'a NetworkState,
    /// state when the trip ends; drives the flow component
    pub outcome_state: &'a NetworkState,
    pub route: &'a [EdgeId],
    pub ideal_time: f64,
    pub actual_time: f64,
    pub preference: Option<&'a PreferenceVector>,
    pub attribute_weights: &'a AttributeWeights,
    pub congestion_threshold: f64,
}

pub fn total_reward(inputs: &RewardInputs<'_>, weights: &RewardWeights) -> Result<RewardBreakdown, RewardError> {
    let preference = match inputs.preference {
        Some(p) => satisfaction_reward(
            inputs.network,
            inputs.decision_state,
            inputs.route,
            p,
            inputs.attribute_weights,
            inputs.congestion_threshold,
        )?,
        None => 0.0,
    };
    let time = time_reward(inputs.ideal_time, inputs.actual_time)?;
    let flow = flow_reward(inputs.outcome_state);
    Ok(RewardBreakdown::combine(preference, time, flow, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Complexity, LaneClass, RoadType, TrafficCondition};
    use crate::scenarios;

    #[test]
    fn weights_must_sum_to_one() {
        assert!(RewardWeights::new(0.0, 0.7, 0.3).is_ok());
        assert!(RewardWeights::new(0.5, 0.4, 0.2).is_err());
        assert!(RewardWeights::new(-0.1, 0.8, 0.3).is_err());
        let w: Result<RewardWeights, _> = serde_json::from_str(r#"{"preference":0.2,"time":0.2,"flow":0.2}"#);
        assert!(w.is_err());
    }

    #[test]
    fn time_reward_values() {
        assert_eq!(time_reward(60.0, 60.0).unwrap(), 1.0);
        assert!(matches!(time_reward(0.0, 10.0), Err(RewardError::NonPositiveTime { .. })));
        assert!(matches!(time_reward(10.0, -1.0), Err(RewardError::NonPositiveTime { .. })));
    }

    #[test]
    fn flow_reward_values() {
        let net = scenarios::grid4x4();
        let mut state = net.free_flow_state();
        assert_eq!(flow_reward(&state), 1.0);
        state.dynamics.iter_mut().for_each(|d| d.occupancy = 0.25);
        assert_eq!(flow_reward(&state), 0.75);
        state.dynamics.iter_mut().for_each(|d| d.occupancy = 1.0);
        assert_eq!(flow_reward(&state), 0.0);
    }

    #[test]
    fn combination_examples() {
        assert_eq!(RewardBreakdown::combine(0.0, 1.0, 1.0, &RewardWeights::generic()).total, 1.0);
        assert_eq!(RewardBreakdown::combine(1.0, 0.0, 0.0, &RewardWeights::personalized()).total, 0.6);
    }

    fn env(road_type: RoadType, lanes: LaneClass, complexity: Complexity, traffic: TrafficCondition) -> EnvironmentVector {
        EnvironmentVector { road_type, lanes, complexity, traffic }
    }

    #[test]
    fn identical_edge_scores_one() {
        let p = PreferenceVector::two_lane_driver();
        let s = edge_similarity(&p, &p.attributes(), &AttributeWeights::default());
        assert!((s.cosine - 1.0).abs() < 1e-15);
        assert_eq!(s.priority, 1.0);
        assert!((s.combined - 1.0).abs() < 1e-15);
    }

    #[test]
    fn priority_mismatch_caps_similarity() {
        let p = PreferenceVector::two_lane_driver();
        let h = env(RoadType::Straight, LaneClass::One, Complexity::Simple, TrafficCondition::Low);
        let s = edge_similarity(&p, &h, &AttributeWeights::default());
        assert_eq!(s.priority, 0.5);
        assert!(s.cosine > 0.5);
        assert_eq!(s.combined, 0.5);
    }

    #[test]
    fn orthogonal_edge_scores_zero() {
        let p = PreferenceVector::two_lane_driver();
        let h = env(RoadType::Curved, LaneClass::ThreePlus, Complexity::Complex, TrafficCondition::High);
        let s = edge_similarity(&p, &h, &AttributeWeights::default());
        assert_eq!(s.cosine, 0.0);
        assert_eq!(s.combined, 0.0);
    }

    #[test]
    fn satisfaction_on_routes() {
        let net = scenarios::twolane_vs_onelane();
        let state = net.free_flow_state();
        let p = PreferenceVector::two_lane_driver();
        // row 1 is two-lane and straight
        let route: Vec<_> = ["J10->J11", "J11->J12"].iter().map(|k| net.edge_by_key(k).unwrap()).collect();
        let r = satisfaction_reward(&net, &state, &route, &p, &AttributeWeights::default(), 0.5).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(matches!(
            satisfaction_reward(&net, &state, &[], &p, &AttributeWeights::default(), 0.5),
            Err(RewardError::EmptyRoute)
        ));
    }

    #[test]
    fn uniform_weights_match_plain_cosine() {
        let a = PreferenceVector::two_lane_driver().encode();
        let b = encode_attributes(&env(RoadType::Straight, LaneClass::One, Complexity::Complex, TrafficCondition::Low));
        assert!((weighted_cosine(&a, &b, &AttributeWeights::uniform()) - cosine(&a, &b)).abs() < 1e-15);
    }
}
