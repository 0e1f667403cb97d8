//! Driver behavior classification and preference identification.
//!
//! Each edge traversal in a driver's history is labeled normal or aggressive
//! from its acceleration, headway and speed profile. The road attributes of
//! the normal traversals, taken attribute by attribute, form the driver's
//! preference vector.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    Complexity, EdgeId, EnvironmentVector, LaneClass, RoadNetwork, RoadType, TrafficCondition,
    DEFAULT_CONGESTION_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("traversal has no samples")]
    EmptyTraversal,
    #[error("history contains no normal traversal")]
    NoNormalBehavior,
    #[error("trajectory file: {0}")]
    Format(String),
    #[error("unknown edge {0}")]
    UnknownEdge(String),
    #[error("invalid preference: {0}")]
    InvalidPreference(String),
}

/// One telemetry row: timestamp, positions, accelerations, headway, speed and edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub tau: f64,
    pub lambda: f64,
    pub phi: f64,
    pub acc_long: f64,
    pub acc_lat: f64,
    /// `None` when there is no leading vehicle.
    pub headway: Option<f64>,
    pub vel_long: f64,
    pub edge: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Normal,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    /// p95 |longitudinal acceleration|, m/s²
    pub acc_long: f64,
    /// p95 |lateral acceleration|, m/s²
    pub acc_lat: f64,
    /// minimum time headway, s
    pub headway: f64,
    /// p95 speed as a multiple of the speed limit
    pub overspeed: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self { acc_long: 3.0, acc_lat: 2.5, headway: 1.0, overspeed: 1.1 }
    }
}

/// Nearest-rank percentile of `values`; `q` in (0, 1].
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Labels one edge traversal. Uses only order-free statistics, so the result
/// does not depend on sample order.
pub fn classify_edge_behavior(
    samples: &[TrajectorySample],
    speed_limit: f64,
    thresholds: &ClassifierThresholds,
) -> Result<Behavior, DriverError> {
    if samples.is_empty() {
        return Err(DriverError::EmptyTraversal);
    }
    let mut a_long: Vec<f64> = samples.iter().map(|s| s.acc_long.abs()).collect();
    let mut a_lat: Vec<f64> = samples.iter().map(|s| s.acc_lat.abs()).collect();
    let mut speed: Vec<f64> = samples.iter().map(|s| s.vel_long).collect();
    let min_headway = samples.iter().filter_map(|s| s.headway).fold(f64::INFINITY, f64::min);
    let aggressive = percentile(&mut a_long, 0.95) > thresholds.acc_long
        || percentile(&mut a_lat, 0.95) > thresholds.acc_lat
        || min_headway < thresholds.headway
        || percentile(&mut speed, 0.95) > thresholds.overspeed * speed_limit;
    Ok(if aggressive { Behavior::Aggressive } else { Behavior::Normal })
}

/// Which attributes must match for an edge to count as satisfying the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityMask {
    pub road_type: bool,
    pub lanes: bool,
    pub complexity: bool,
    pub traffic: bool,
}

impl Default for PriorityMask {
    fn default() -> Self {
        Self { road_type: true, lanes: true, complexity: false, traffic: false }
    }
}

impl PriorityMask {
    pub fn as_array(&self) -> [bool; 4] {
        [self.road_type, self.lanes, self.complexity, self.traffic]
    }

    pub fn any(&self) -> bool {
        self.as_array().iter().any(|b| *b)
    }
}

/// Driver preference vector `p` with its priority mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pub road_type: RoadType,
    pub lanes: LaneClass,
    pub complexity: Complexity,
    pub traffic: TrafficCondition,
    #[serde(default)]
    pub priority: PriorityMask,
}

/// Length of the one-hot attribute encoding: ζ(3) ψ(3) ν(2) κ(2).
pub const ENCODED_LEN: usize = 10;

/// Block boundaries of the attribute encoding.
pub const BLOCKS: [std::ops::Range<usize>; 4] = [0..3, 3..6, 6..8, 8..10];

pub fn encode_attributes(h: &EnvironmentVector) -> [f64; ENCODED_LEN] {
    let mut out = [0.0; ENCODED_LEN];
    out[h.road_type as usize] = 1.0;
    out[3 + h.lanes as usize] = 1.0;
    out[6 + h.complexity as usize] = 1.0;
    out[8 + h.traffic as usize] = 1.0;
    out
}

/// Inverse of [`encode_attributes`]; `None` unless every block is exactly one-hot.
pub fn decode_attributes(v: &[f64; ENCODED_LEN]) -> Option<EnvironmentVector> {
    let hot = |r: std::ops::Range<usize>| {
        let idx: Vec<usize> = r.clone().filter(|&i| v[i] == 1.0).collect();
        let zeros = r.clone().filter(|&i| v[i] == 0.0).count();
        (idx.len() == 1 && zeros == r.len() - 1).then(|| idx[0] - r.start)
    };
    Some(EnvironmentVector {
        road_type: RoadType::ALL[hot(BLOCKS[0].clone())?],
        lanes: LaneClass::ALL[hot(BLOCKS[1].clone())?],
        complexity: Complexity::ALL[hot(BLOCKS[2].clone())?],
        traffic: TrafficCondition::ALL[hot(BLOCKS[3].clone())?],
    })
}

impl PreferenceVector {
    pub fn new(
        road_type: RoadType,
        lanes: LaneClass,
        complexity: Complexity,
        traffic: TrafficCondition,
    ) -> Self {
        Self { road_type, lanes, complexity, traffic, priority: PriorityMask::default() }
    }

    /// `[straight, two, simple, low]`
    pub fn two_lane_driver() -> Self {
        Self::new(RoadType::Straight, LaneClass::Two, Complexity::Simple, TrafficCondition::Low)
    }

    /// `[straight, one, simple, low]`
    pub fn one_lane_driver() -> Self {
        Self::new(RoadType::Straight, LaneClass::One, Complexity::Simple, TrafficCondition::Low)
    }

    pub fn attributes(&self) -> EnvironmentVector {
        EnvironmentVector {
            road_type: self.road_type,
            lanes: self.lanes,
            complexity: self.complexity,
            traffic: self.traffic,
        }
    }

    pub fn encode(&self) -> [f64; ENCODED_LEN] {
        encode_attributes(&self.attributes())
    }

    /// Parses `straight,two,simple,low` style attribute lists.
    pub fn parse(text: &str) -> Result<Self, DriverError> {
        let parts: Vec<String> = text
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(|s| s.trim().to_lowercase())
            .collect();
        if parts.len() != 4 {
            return Err(DriverError::InvalidPreference(format!("expected 4 attributes, got {text:?}")));
        }
        let bad = |what: &str, v: &str| DriverError::InvalidPreference(format!("unknown {what} {v:?}"));
        let road_type = match parts[0].as_str() {
            "straight" => RoadType::Straight,
            "curved" => RoadType::Curved,
            "ramp" => RoadType::Ramp,
            v => return Err(bad("road type", v)),
        };
        let lanes = match parts[1].as_str() {
            "one" | "1" => LaneClass::One,
            "two" | "2" => LaneClass::Two,
            "three+" | "3+" | "three" | "3" => LaneClass::ThreePlus,
            v => return Err(bad("lane count", v)),
        };
        let complexity = match parts[2].as_str() {
            "simple" => Complexity::Simple,
            "complex" => Complexity::Complex,
            v => return Err(bad("complexity", v)),
        };
        let traffic = match parts[3].as_str() {
            "low" => TrafficCondition::Low,
            "high" => TrafficCondition::High,
            v => return Err(bad("traffic condition", v)),
        };
        Ok(Self::new(road_type, lanes, complexity, traffic))
    }

    pub fn label(&self) -> String {
        let lanes = match self.lanes {
            LaneClass::One => "one",
            LaneClass::Two => "two",
            LaneClass::ThreePlus => "three+",
        };
        format!(
            "{},{},{},{}",
            format!("{:?}", self.road_type).to_lowercase(),
            lanes,
            format!("{:?}", self.complexity).to_lowercase(),
            format!("{:?}", self.traffic).to_lowercase()
        )
    }
}

/// Mode over a fixed category order; the earliest category wins ties.
fn mode<T: Copy + PartialEq>(order: &[T], values: impl Iterator<Item = T>) -> T {
    let mut counts = vec![0usize; order.len()];
    for v in values {
        let i = order.iter().position(|o| *o == v).expect("category listed");
        counts[i] += 1;
    }
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    order[best]
}

/// Attribute-wise mode of the environment vectors seen during normal traversals.
pub fn build_preference_vector(
    history: &[(Behavior, EnvironmentVector)],
    priority: PriorityMask,
) -> Result<PreferenceVector, DriverError> {
    let normal: Vec<&EnvironmentVector> =
        history.iter().filter(|(b, _)| *b == Behavior::Normal).map(|(_, h)| h).collect();
    if normal.is_empty() {
        return Err(DriverError::NoNormalBehavior);
    }
    Ok(PreferenceVector {
        road_type: mode(&RoadType::ALL, normal.iter().map(|h| h.road_type)),
        lanes: mode(&LaneClass::ALL, normal.iter().map(|h| h.lanes)),
        complexity: mode(&Complexity::ALL, normal.iter().map(|h| h.complexity)),
        traffic: mode(&TrafficCondition::ALL, normal.iter().map(|h| h.traffic)),
        priority,
    })
}

/// Maximum time gap between samples of the same traversal.
pub const TRAVERSAL_GAP: f64 = 2.0;

/// Splits a history into traversals: a new one starts when the edge changes or
/// the timestamps jump by more than [`TRAVERSAL_GAP`].
pub fn split_traversals(samples: &[TrajectorySample]) -> Vec<&[TrajectorySample]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        let boundary = i == samples.len()
            || samples[i].edge != samples[i - 1].edge
            || samples[i].tau - samples[i - 1].tau > TRAVERSAL_GAP;
        if boundary && i > start {
            out.push(&samples[start..i]);
            start = i;
        }
    }
    out
}

/// Traffic condition inferred from observed speed via `v = limit * (1 - rho)`.
pub fn inferred_traffic(traversal: &[TrajectorySample], speed_limit: f64, congestion_threshold: f64) -> TrafficCondition {
    let mean = traversal.iter().map(|s| s.vel_long).sum::<f64>() / traversal.len().max(1) as f64;
    let rho = (1.0 - mean / speed_limit).clamp(0.0, 1.0);
    crate::network::traffic_condition(rho, congestion_threshold)
}

/// Labels every traversal and pairs it with its environment vector.
pub fn label_history(
    network: &RoadNetwork,
    samples: &[TrajectorySample],
    thresholds: &ClassifierThresholds,
    congestion_threshold: f64,
) -> Result<Vec<(EdgeId, Behavior, EnvironmentVector)>, DriverError> {
    split_traversals(samples)
        .into_iter()
        .map(|t| {
            let edge = network.edge_by_key(&t[0].edge).map_err(|_| DriverError::UnknownEdge(t[0].edge.clone()))?;
            let e = network.edge(edge);
            let label = classify_edge_behavior(t, e.speed_limit, thresholds)?;
            let h = EnvironmentVector {
                road_type: e.road_type,
                lanes: LaneClass::from_lanes(e.lanes),
                complexity: network.edge_complexity(edge),
                traffic: inferred_traffic(t, e.speed_limit, congestion_threshold),
            };
            Ok((edge, label, h))
        })
        .collect()
}

/// Full identification pipeline: split, classify, then take the attribute-wise mode.
pub fn identify_preference(
    network: &RoadNetwork,
    samples: &[TrajectorySample],
    thresholds: &ClassifierThresholds,
    priority: PriorityMask,
) -> Result<PreferenceVector, DriverError> {
    let labeled = label_history(network, samples, thresholds, DEFAULT_CONGESTION_THRESHOLD)?;
    let history: Vec<_> = labeled.into_iter().map(|(_, b, h)| (b, h)).collect();
    build_preference_vector(&history, priority)
}

const CSV_HEADER: [&str; 8] = ["tau", "lambda", "phi", "acc_long", "acc_lat", "headway", "vel_long", "edge"];

pub fn write_trajectories<W: Write>(out: W, samples: &[TrajectorySample]) -> Result<(), DriverError> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| DriverError::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fmt)?;
    for s in samples {
        w.write_record([
            s.tau.to_string(),
            s.lambda.to_string(),
            s.phi.to_string(),
            s.acc_long.to_string(),
            s.acc_lat.to_string(),
            s.headway.map(|h| h.to_string()).unwrap_or_default(),
            s.vel_long.to_string(),
            s.edge.clone(),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| DriverError::Format(e.to_string()))
}

pub fn read_trajectories<R: Read>(input: R) -> Result<Vec<TrajectorySample>, DriverError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| DriverError::Format(e.to_string()))?;
        if rec.len() != CSV_HEADER.len() {
            return Err(DriverError::Format(format!("row {} has {} columns", line + 1, rec.len())));
        }
        let num = |i: usize| -> Result<f64, DriverError> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| DriverError::Format(format!("row {}: bad {} {:?}", line + 1, CSV_HEADER[i], &rec[i])))
        };
        let headway = match rec[5].trim() {
            "" | "none" | "inf" => None,
            _ => Some(num(5)?),
        };
        out.push(TrajectorySample {
            tau: num(0)?,
            lambda: num(1)?,
            phi: num(2)?,
            acc_long: num(3)?,
            acc_lat: num(4)?,
            headway,
            vel_long: num(6)?,
            edge: rec[7].trim().to_string(),
        });
    }
    Ok(out)
}

/// Settings for [`synthesize_history`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub traversals: usize,
    /// probability of flipping a traversal's behavior class
    pub noise: f64,
    pub samples_per_traversal: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { traversals: 200, noise: 0.0, samples_per_traversal: 10, seed: 0 }
    }
}

fn static_match(network: &RoadNetwork, e: EdgeId, p: &PreferenceVector) -> bool {
    let edge = network.edge(e);
    edge.road_type == p.road_type
        && LaneClass::from_lanes(edge.lanes) == p.lanes
        && network.edge_complexity(e) == p.complexity
}

/// Generates a driving history for a driver whose true preference is `truth`:
/// calm driving where the road matches it, aggressive driving elsewhere.
/// Half the traversals are drawn from matching roads (when any exist).
pub fn synthesize_history(network: &RoadNetwork, truth: &PreferenceVector, cfg: &SynthConfig) -> Vec<TrajectorySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let matching: Vec<EdgeId> =
        (0..network.num_edges()).map(EdgeId).filter(|&e| static_match(network, e, truth)).collect();
    let mut out = Vec::with_capacity(cfg.traversals * cfg.samples_per_traversal);
    let mut tau = 0.0;
    for _ in 0..cfg.traversals {
        let (edge, traffic) = if !matching.is_empty() && rng.gen_bool(0.5) {
            (matching[rng.gen_range(0..matching.len())], truth.traffic)
        } else {
            let e = EdgeId(rng.gen_range(0..network.num_edges()));
            let t = if rng.gen_bool(0.5) { TrafficCondition::Low } else { TrafficCondition::High };
            (e, t)
        };
        let matches = static_match(network, edge, truth) && traffic == truth.traffic;
        let flip = rng.gen_bool(cfg.noise.clamp(0.0, 1.0));
        let calm = matches != flip;
        let limit = network.edge(edge).speed_limit;
        let cruise = match traffic {
            TrafficCondition::Low => 0.8 * limit,
            TrafficCondition::High => 0.3 * limit,
        };
        let key = network.edge_key(edge);
        let mut lambda = 0.0;
        for _ in 0..cfg.samples_per_traversal.max(1) {
            let (acc_long, acc_lat, headway, vel) = if calm {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.5..0.5),
                    Some(rng.gen_range(2.0..4.0)),
                    cruise * rng.gen_range(0.95..1.05),
                )
            } else {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (
                    sign * rng.gen_range(3.5..5.0),
                    rng.gen_range(2.8..4.0),
                    Some(rng.gen_range(0.4..0.9)),
                    match traffic {
                        TrafficCondition::Low => limit * rng.gen_range(1.15..1.3),
                        TrafficCondition::High => cruise * rng.gen_range(0.95..1.05),
                    },
                )
            };
            lambda += vel;
            out.push(TrajectorySample {
                tau,
                lambda,
                phi: rng.gen_range(-0.3..0.3),
                acc_long,
                acc_lat,
                headway,
                vel_long: vel,
                edge: key.clone(),
            });
            tau += 1.0;
        }
        tau += 5.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    fn sample(acc_long: f64, acc_lat: f64, headway: f64, vel: f64) -> TrajectorySample {
        TrajectorySample {
            tau: 0.0,
            lambda: 0.0,
            phi: 0.0,
            acc_long,
            acc_lat,
            headway: Some(headway),
            vel_long: vel,
            edge: "A->B".into(),
        }
    }

    #[test]
    fn calm_driving_is_normal() {
        let t = ClassifierThresholds::default();
        let samples = vec![sample(0.0, 0.0, 3.0, 8.0); 10];
        assert_eq!(classify_edge_behavior(&samples, 10.0, &t).unwrap(), Behavior::Normal);
    }

    #[test]
    fn hard_acceleration_is_aggressive() {
        let t = ClassifierThresholds::default();
        let samples = vec![sample(4.0, 0.0, 3.0, 8.0); 10];
        assert_eq!(classify_edge_behavior(&samples, 10.0, &t).unwrap(), Behavior::Aggressive);
    }

    #[test]
    fn single_short_headway_is_aggressive() {
        let t = ClassifierThresholds::default();
        let mut samples = vec![sample(0.0, 0.0, 3.0, 8.0); 10];
        samples[4].headway = Some(0.5);
        assert_eq!(classify_edge_behavior(&samples, 10.0, &t).unwrap(), Behavior::Aggressive);
        samples[4].headway = None;
        assert_eq!(classify_edge_behavior(&samples, 10.0, &t).unwrap(), Behavior::Normal);
    }

    #[test]
    fn speeding_and_lateral_rules() {
        let t = ClassifierThresholds::default();
        assert_eq!(
            classify_edge_behavior(&vec![sample(0.0, 0.0, 3.0, 11.5); 10], 10.0, &t).unwrap(),
            Behavior::Aggressive
        );
        assert_eq!(
            classify_edge_behavior(&vec![sample(0.0, 3.0, 3.0, 8.0); 10], 10.0, &t).unwrap(),
            Behavior::Aggressive
        );
    }

    #[test]
    fn empty_traversal_rejected() {
        assert!(matches!(
            classify_edge_behavior(&[], 10.0, &ClassifierThresholds::default()),
            Err(DriverError::EmptyTraversal)
        ));
    }

    fn h(lanes: LaneClass) -> EnvironmentVector {
        EnvironmentVector {
            road_type: RoadType::Straight,
            lanes,
            complexity: Complexity::Simple,
            traffic: TrafficCondition::Low,
        }
    }

    #[test]
    fn uniform_history_gives_that_vector() {
        let history = vec![(Behavior::Normal, h(LaneClass::Two)); 10];
        let p = build_preference_vector(&history, PriorityMask::default()).unwrap();
        assert_eq!(p, PreferenceVector::two_lane_driver());
    }

    #[test]
    fn lane_preference_is_the_mode() {
        let mut history = vec![(Behavior::Normal, h(LaneClass::One)); 6];
        history.extend(vec![(Behavior::Normal, h(LaneClass::Two)); 4]);
        let p = build_preference_vector(&history, PriorityMask::default()).unwrap();
        assert_eq!(p.lanes, LaneClass::One);
        // ties go to the fewer-lanes category
        let tie = vec![(Behavior::Normal, h(LaneClass::Two)), (Behavior::Normal, h(LaneClass::One))];
        assert_eq!(build_preference_vector(&tie, PriorityMask::default()).unwrap().lanes, LaneClass::One);
    }

    #[test]
    fn all_aggressive_history_fails() {
        let history = vec![(Behavior::Aggressive, h(LaneClass::One)); 3];
        assert!(matches!(
            build_preference_vector(&history, PriorityMask::default()),
            Err(DriverError::NoNormalBehavior)
        ));
    }

    #[test]
    fn encoding_layout() {
        assert_eq!(PreferenceVector::two_lane_driver().encode(), [1., 0., 0., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(PreferenceVector::one_lane_driver().encode(), [1., 0., 0., 1., 0., 0., 1., 0., 1., 0.]);
        let p = PreferenceVector::two_lane_driver();
        assert_eq!(p.encode(), encode_attributes(&p.attributes()));
    }

    #[test]
    fn parse_and_label() {
        let p = PreferenceVector::parse("[straight, two, simple, low]").unwrap();
        assert_eq!(p, PreferenceVector::two_lane_driver());
        assert_eq!(PreferenceVector::parse(&p.label()).unwrap(), p);
        assert!(PreferenceVector::parse("straight,two").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let net = scenarios::twolane_vs_onelane();
        let cfg = SynthConfig { traversals: 5, ..Default::default() };
        let samples = synthesize_history(&net, &PreferenceVector::one_lane_driver(), &cfg);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &samples).unwrap();
        assert_eq!(read_trajectories(&buf[..]).unwrap(), samples);
    }

    #[test]
    fn closed_loop_without_noise() {
        let net = scenarios::twolane_vs_onelane();
        for truth in [PreferenceVector::two_lane_driver(), PreferenceVector::one_lane_driver()] {
            let samples = synthesize_history(&net, &truth, &SynthConfig { seed: 3, ..Default::default() });
            let p = identify_preference(&net, &samples, &ClassifierThresholds::default(), PriorityMask::default())
                .unwrap();
            assert_eq!(p, truth);
        }
    }

    #[test]
    fn single_aggressive_traversal_has_no_preference() {
        let net = scenarios::grid4x4();
        let truth = PreferenceVector::new(RoadType::Ramp, LaneClass::ThreePlus, Complexity::Complex, TrafficCondition::High);
        let cfg = SynthConfig { traversals: 1, ..Default::default() };
        let samples = synthesize_history(&net, &truth, &cfg);
        assert!(matches!(
            identify_preference(&net, &samples, &ClassifierThresholds::default(), PriorityMask::default()),
            Err(DriverError::NoNormalBehavior)
        ));
    }
}
