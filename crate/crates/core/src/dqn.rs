//! Deep Q-learning over the K-candidate action space.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, Phase, TrainingMetadata};
use crate::driver::PreferenceVector;
use crate::gnn::{self, GnnError, GnnParams, Gradients, Optimizer, OptimizerKind};
use crate::network::{col, encode_state, EdgeId, FeatureMatrix, GraphTopology, NetworkState, RoadNetwork};
use crate::paths::{self, k_candidate_paths, CandidateRouteSet, PathError};
use crate::rewards::{self, AttributeWeights, RewardBreakdown, RewardInputs, RewardWeights};
use crate::scenarios::Scenario;
use crate::sim::{SimConfig, SimError, Simulation};

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("no candidate routes to choose from")]
    EmptyCandidates,
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("no reachable request after {0} draws")]
    NoRequest(usize),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reward(#[from] rewards::RewardError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

/// `splitmix64` over `(seed, stream, index)`; independent sub-seeds per purpose.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_BUFFER: u64 = 3;
const STREAM_OD: u64 = 11;
const STREAM_ACTION: u64 = 12;
const STREAM_BACKGROUND: u64 = 13;

/// Encoding with the selected-path column set on `route`.
pub fn with_selection(base: &FeatureMatrix, route: &[EdgeId]) -> FeatureMatrix {
    let mut x = base.clone();
    for r in 0..x.rows {
        x.data[r * x.cols + col::SELECTED] = 0.0;
    }
    for e in route {
        x.data[e.0 * x.cols + col::SELECTED] = 1.0;
    }
    x
}

/// Q-values of every candidate route in a state.
pub fn candidate_q_values(
    params: &GnnParams,
    topo: &GraphTopology,
    base: &FeatureMatrix,
    routes: &[Vec<EdgeId>],
) -> Result<Vec<f64>, GnnError> {
    routes.iter().map(|r| gnn::q_value(params, &with_selection(base, r), topo)).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// ε-greedy choice among candidates.
pub fn select_action(
    params: &GnnParams,
    topo: &GraphTopology,
    base: &FeatureMatrix,
    candidates: &[Vec<EdgeId>],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize, DqnError> {
    if candidates.is_empty() {
        return Err(DqnError::EmptyCandidates);
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..candidates.len()));
    }
    let q = candidate_q_values(params, topo, base, candidates)?;
    Ok(argmax(&q).unwrap_or(0))
}

#[derive(Debug, Clone)]
pub struct NextState {
    pub state: Arc<FeatureMatrix>,
    pub candidates: Arc<Vec<Vec<EdgeId>>>,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<FeatureMatrix>,
    pub candidates: Arc<Vec<Vec<EdgeId>>>,
    pub action: usize,
    pub reward: f64,
    /// `None` marks a terminal transition
    pub next: Option<NextState>,
}

impl Transition {
    pub fn new(
        state: Arc<FeatureMatrix>,
        candidates: Arc<Vec<Vec<EdgeId>>>,
        action: usize,
        reward: f64,
        next: Option<NextState>,
    ) -> Result<Self, DqnError> {
        if action >= candidates.len() {
            return Err(DqnError::InvalidTransition(format!("action {action} of {}", candidates.len())));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(DqnError::InvalidTransition(format!("reward {reward} outside [0, 1]")));
        }
        if next.as_ref().is_some_and(|n| n.candidates.is_empty()) {
            return Err(DqnError::InvalidTransition("next state has no candidates".into()));
        }
        Ok(Self { state, candidates, action, reward, next })
    }

    pub fn terminal(&self) -> bool {
        self.next.is_none()
    }
}

/// Fixed-capacity FIFO replay memory with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: std::collections::VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity: capacity.max(1), items: Default::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Distinct indices, uniformly chosen.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>, DqnError> {
        if self.items.len() < batch {
            return Err(DqnError::InsufficientBuffer { have: self.items.len(), need: batch });
        }
        Ok(index::sample(&mut self.rng, self.items.len(), batch).into_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// share of episodes over which ε decays linearly
    pub epsilon_decay_fraction: f64,
    pub target_sync_every: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// gradient step every this many routing decisions
    pub train_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            episodes: 300,
            steps_per_episode: 150,
            eval_every: 30,
            eval_episodes: 5,
            gamma: 0.95,
            alpha: 1e-3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            target_sync_every: 200,
            batch_size: 32,
            buffer_capacity: 5000,
            train_every: 1,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), DqnError> {
        let positive = [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("train_every", self.train_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DqnError::Config(format!("{name} must be positive")));
        }
        if self.target_sync_every == 0 {
            return Err(DqnError::Config("target_sync_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.alpha > 0.0) {
            return Err(DqnError::Config(format!("gamma {} / alpha {} out of range", self.gamma, self.alpha)));
        }
        let eps = [self.epsilon_start, self.epsilon_end, self.epsilon_decay_fraction];
        if eps.iter().any(|e| !(0.0..=1.0).contains(e)) || self.epsilon_end > self.epsilon_start {
            return Err(DqnError::Config("epsilon schedule must satisfy 0 <= end <= start <= 1".into()));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(DqnError::Config("batch_size exceeds buffer_capacity".into()));
        }
        Ok(())
    }

    /// ε for a training episode: linear from start to end, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.episodes as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let f = episode as f64 / span;
        if f >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

/// Online and target networks, optimizer and replay memory.
#[derive(Debug, Clone)]
pub struct Learner {
    pub online: GnnParams,
    pub target: GnnParams,
    pub buffer: ReplayBuffer,
    pub gradient_steps: u64,
    optimizer: Optimizer,
    schedule: TrainSchedule,
    topo: GraphTopology,
}

impl Learner {
    pub fn new(params: GnnParams, schedule: &TrainSchedule, topo: GraphTopology, seed: u64) -> Self {
        let optimizer = Optimizer::new(schedule.optimizer, schedule.alpha, &params);
        Self {
            target: params.clone(),
            online: params,
            buffer: ReplayBuffer::new(schedule.buffer_capacity, derive_seed(seed, STREAM_BUFFER, 0)),
            gradient_steps: 0,
            optimizer,
            schedule: schedule.clone(),
            topo,
        }
    }

    pub fn topology(&self) -> &GraphTopology {
        &self.topo
    }

    /// `r + γ max_a' Q_target(s', a')`, or `r` when terminal.
    pub fn bellman_target(target: &GnnParams, topo: &GraphTopology, t: &Transition, gamma: f64) -> Result<f64, GnnError> {
        match &t.next {
            None => Ok(t.reward),
            Some(_) if gamma == 0.0 => Ok(t.reward),
            Some(next) => {
                let q = candidate_q_values(target, topo, &next.state, &next.candidates)?;
                Ok(t.reward + gamma * q.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            }
        }
    }

    /// One gradient step on a sampled batch; returns the mean squared Bellman error.
    pub fn train_step(&mut self) -> Result<f64, DqnError> {
        let batch = self.schedule.batch_size;
        let picks = self.buffer.sample_indices(batch)?;
        let mut grads = Gradients::zeros(&self.online.config);
        let mut loss = 0.0;
        for i in picks {
            let t = self.buffer.get(i).expect("sampled index in range");
            let y = Self::bellman_target(&self.target, &self.topo, t, self.schedule.gamma)?;
            let x = with_selection(&t.state, &t.candidates[t.action]);
            let cache = gnn::forward(&self.online, &x, &self.topo)?;
            let err = cache.q - y;
            loss += err * err / batch as f64;
            let g = gnn::backward(&self.online, &cache, 2.0 * err / batch as f64)?;
            grads.add_scaled(1.0, &g);
        }
        self.optimizer.step(&mut self.online, &grads)?;
        self.gradient_steps += 1;
        if self.gradient_steps.is_multiple_of(self.schedule.target_sync_every) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }
}

/// Which arrival time enters the time reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardTime {
    #[default]
    Realized,
    Predicted,
}

/// Everything about an episode except the policy.
#[derive(Debug, Clone)]
pub struct EpisodeSettings {
    pub k: usize,
    pub weights: RewardWeights,
    pub attribute_weights: AttributeWeights,
    /// drives the satisfaction component and the alignment statistic
    pub preference: Option<PreferenceVector>,
    pub congestion_threshold: f64,
    pub steps: usize,
    /// simulated seconds between routing decisions
    pub step_seconds: f64,
    /// extra vehicles per decision on static shortest-time routes
    pub background_per_step: usize,
    /// seconds allowed after the last decision for routed vehicles to finish
    pub drain_horizon: f64,
    pub reward_time: RewardTime,
    pub sim: SimConfig,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            k: 4,
            weights: RewardWeights::generic(),
            attribute_weights: AttributeWeights::default(),
            preference: None,
            congestion_threshold: crate::network::DEFAULT_CONGESTION_THRESHOLD,
            steps: 150,
            step_seconds: 1.0,
            background_per_step: 0,
            drain_horizon: 3600.0,
            reward_time: RewardTime::Realized,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    ShortestDistance,
    ShortestTime,
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// ε-greedy over the Q-network
    Q { params: &'a GnnParams, epsilon: f64 },
    Baseline(Baseline),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source: String,
    pub destination: String,
    pub action: Option<usize>,
    pub route: Vec<String>,
    pub ideal_time: f64,
    pub actual_time: f64,
    pub reward: RewardBreakdown,
    pub alignment: Option<f64>,
    pub arrived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub mean_reward: f64,
    pub components: RewardBreakdown,
    pub mean_delay: f64,
    pub mean_alignment: Option<f64>,
    /// network mean occupancy at each decision
    pub occupancy: Vec<f64>,
    pub resampled: usize,
    pub mean_loss: Option<f64>,
}

struct Trip {
    vehicle: usize,
    step: usize,
    source: usize,
    destination: usize,
    decision: Arc<NetworkState>,
    base: Arc<FeatureMatrix>,
    candidates: Arc<Vec<Vec<EdgeId>>>,
    action: Option<usize>,
    route: Vec<EdgeId>,
    ideal: f64,
    predicted: f64,
}

struct Finished {
    trip: Trip,
    record: StepRecord,
}

fn draw_request(
    network: &RoadNetwork,
    state: &NetworkState,
    k: usize,
    rng: &mut ChaCha8Rng,
    resampled: &mut usize,
) -> Result<CandidateRouteSet, DqnError> {
    let n = network.num_junctions();
    if n < 2 {
        return Err(DqnError::NoRequest(0));
    }
    const MAX_DRAWS: usize = 1000;
    for _ in 0..MAX_DRAWS {
        let s = rng.gen_range(0..n);
        let mut d = rng.gen_range(0..n - 1);
        if d >= s {
            d += 1;
        }
        match k_candidate_paths(network, state, s, d, k) {
            Ok(c) => return Ok(c),
            Err(PathError::NoPath(..)) => *resampled += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Err(DqnError::NoRequest(MAX_DRAWS))
}

fn baseline_route(network: &RoadNetwork, state: &NetworkState, s: usize, d: usize, b: Baseline) -> Option<Vec<EdgeId>> {
    match b {
        Baseline::ShortestDistance => paths::shortest_path_by(network, s, d, |e| network.edge(e).length),
        Baseline::ShortestTime => paths::shortest_path_by(network, s, d, |e| state.dynamics[e.0].travel_time),
    }
}

fn finish_trip(sim: &Simulation, settings: &EpisodeSettings, trip: Trip) -> Result<Finished, DqnError> {
    let network = sim.network();
    let v = sim.vehicle(trip.vehicle);
    let arrived = v.arrive_time.is_some();
    let realized = v.travel_time().unwrap_or(sim.time() - v.depart_time).max(settings.sim.dt);
    let actual = match settings.reward_time {
        RewardTime::Realized => realized,
        RewardTime::Predicted => trip.predicted,
    };
    let outcome = sim.state();
    let reward = rewards::total_reward(
        &RewardInputs {
            network,
            decision_state: &trip.decision,
            outcome_state: outcome,
            route: &trip.route,
            ideal_time: trip.ideal,
            actual_time: actual,
            preference: settings.preference.as_ref(),
            attribute_weights: &settings.attribute_weights,
            congestion_threshold: settings.congestion_threshold,
        },
        &settings.weights,
    )?;
    let alignment = match &settings.preference {
        Some(p) => Some(rewards::alignment_fraction(&rewards::route_similarities(
            network,
            &trip.decision,
            &trip.route,
            p,
            &settings.attribute_weights,
            settings.congestion_threshold,
        )?)),
        None => None,
    };
    let record = StepRecord {
        step: trip.step,
        source: network.junction(trip.source).id.clone(),
        destination: network.junction(trip.destination).id.clone(),
        action: trip.action,
        route: trip.route.iter().map(|e| network.edge_key(*e)).collect(),
        ideal_time: trip.ideal,
        actual_time: realized,
        reward,
        alignment,
        arrived,
    };
    Ok(Finished { trip, record })
}

/// Runs one episode of `settings.steps` routing decisions.
///
/// With a learner, decisions follow the learner's online network at the given
/// ε, transitions are stored at arrival and gradient steps run as scheduled.
/// Without one, `policy` is followed read-only.
pub fn run_episode(
    scenario: &Scenario,
    settings: &EpisodeSettings,
    policy: Policy<'_>,
    mut learner: Option<&mut Learner>,
    train_every: usize,
    seed: u64,
) -> Result<EpisodeLog, DqnError> {
    let network = scenario.network.clone();
    let topo = network.topology();
    let mut sim = scenario.simulation(settings.sim)?;
    let mut od_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_OD, 0));
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ACTION, 0));
    let mut bg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BACKGROUND, 0));
    let mut background_routes: HashMap<(usize, usize), Option<Vec<EdgeId>>> = HashMap::new();
    let ticks = (settings.step_seconds / settings.sim.dt).round().max(1.0) as usize;

    let mut in_flight: Vec<Trip> = Vec::new();
    let mut awaiting_next: Vec<(Trip, f64)> = Vec::new();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut occupancy = Vec::with_capacity(settings.steps);
    let mut resampled = 0;
    let mut losses = Vec::new();

    let collect_arrivals = |sim: &Simulation,
                                in_flight: &mut Vec<Trip>,
                                done: &mut Vec<Finished>,
                                force: bool|
     -> Result<(), DqnError> {
        let mut keep = Vec::with_capacity(in_flight.len());
        for trip in in_flight.drain(..) {
            if force || sim.vehicle(trip.vehicle).arrive_time.is_some() {
                done.push(finish_trip(sim, settings, trip)?);
            } else {
                keep.push(trip);
            }
        }
        *in_flight = keep;
        Ok(())
    };

    for step in 0..settings.steps {
        let state = Arc::new(sim.state().clone());
        occupancy.push(state.mean_occupancy());
        let cands = draw_request(&network, &state, settings.k, &mut od_rng, &mut resampled)?;
        let base = Arc::new(encode_state(&network, &state)?);
        let routes = Arc::new(cands.routes.clone());

        if let Some(l) = learner.as_deref_mut() {
            for (trip, reward) in awaiting_next.drain(..) {
                let next = NextState { state: base.clone(), candidates: routes.clone() };
                l.buffer.push(Transition::new(trip.base, trip.candidates, trip.action.unwrap_or(0), reward, Some(next))?);
            }
        }

        let (action, route) = match (&learner, policy) {
            (Some(l), Policy::Q { epsilon, .. }) => {
                let a = select_action(&l.online, &topo, &base, &routes, epsilon, &mut action_rng)?;
                (Some(a), routes[a].clone())
            }
            (None, Policy::Q { params, epsilon }) => {
                let a = select_action(params, &topo, &base, &routes, epsilon, &mut action_rng)?;
                (Some(a), routes[a].clone())
            }
            (_, Policy::Baseline(b)) => {
                let r = baseline_route(&network, &state, cands.source, cands.destination, b)
                    .ok_or_else(|| PathError::NoPath(cands.source.to_string(), cands.destination.to_string()))?;
                (None, r)
            }
        };
        let ideal = paths::ideal_time(&network, &route)?;
        let predicted = paths::estimated_time(&network, &state, &route)?;
        let vehicle = sim.inject_vehicle(route.clone(), sim.time())?;
        in_flight.push(Trip {
            vehicle,
            step,
            source: cands.source,
            destination: cands.destination,
            decision: state.clone(),
            base,
            candidates: routes,
            action,
            route,
            ideal,
            predicted,
        });

        let n = network.num_junctions();
        for _ in 0..settings.background_per_step {
            let s = bg_rng.gen_range(0..n);
            let d = (s + 1 + bg_rng.gen_range(0..n - 1)) % n;
            let r = background_routes
                .entry((s, d))
                .or_insert_with(|| paths::shortest_path_by(&network, s, d, |e| network.edge(e).free_flow_time()))
                .clone();
            if let Some(r) = r {
                sim.inject_vehicle(r, sim.time())?;
            }
        }

        for _ in 0..ticks {
            sim.step();
            let mut done = Vec::new();
            collect_arrivals(&sim, &mut in_flight, &mut done, false)?;
            for f in done {
                records.push(f.record.clone());
                awaiting_next.push((f.trip, f.record.reward.total));
            }
        }

        if let Some(l) = learner.as_deref_mut() {
            if (step + 1) % train_every.max(1) == 0 && l.buffer.len() >= l.schedule.batch_size {
                losses.push(l.train_step()?);
            }
        }
    }

    let horizon = sim.time() + settings.drain_horizon;
    while !in_flight.is_empty() && sim.time() < horizon {
        sim.step();
        let mut done = Vec::new();
        collect_arrivals(&sim, &mut in_flight, &mut done, false)?;
        for f in done {
            records.push(f.record.clone());
            awaiting_next.push((f.trip, f.record.reward.total));
        }
    }
    let mut done = Vec::new();
    collect_arrivals(&sim, &mut in_flight, &mut done, true)?;
    for f in done {
        records.push(f.record.clone());
        awaiting_next.push((f.trip, f.record.reward.total));
    }
    if let Some(l) = learner {
        for (trip, reward) in awaiting_next.drain(..) {
            l.buffer.push(Transition::new(trip.base, trip.candidates, trip.action.unwrap_or(0), reward, None)?);
        }
    }

    records.sort_by_key(|r| r.step);
    Ok(summarize(records, occupancy, resampled, losses))
}

fn summarize(steps: Vec<StepRecord>, occupancy: Vec<f64>, resampled: usize, losses: Vec<f64>) -> EpisodeLog {
    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
    let components = RewardBreakdown {
        preference: mean(&|r| r.reward.preference),
        time: mean(&|r| r.reward.time),
        flow: mean(&|r| r.reward.flow),
        total: mean(&|r| r.reward.total),
    };
    let alignments: Vec<f64> = steps.iter().filter_map(|r| r.alignment).collect();
    EpisodeLog {
        mean_reward: components.total,
        components,
        mean_delay: mean(&|r| r.actual_time - r.ideal_time),
        mean_alignment: (!alignments.is_empty()).then(|| alignments.iter().sum::<f64>() / alignments.len() as f64),
        occupancy,
        resampled,
        mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        steps,
    }
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub phase: Phase,
    pub mode: String,
    pub mean_reward: f64,
    pub components: RewardBreakdown,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub mean_delay: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: GnnParams,
    pub best_episode: usize,
    pub best_eval: f64,
    pub last: GnnParams,
    pub metrics: Vec<MetricsRecord>,
}

impl TrainOutcome {
    /// `(episode, mean eval reward)` at every evaluation point.
    pub fn eval_series(&self) -> Vec<(usize, f64)> {
        self.metrics.iter().filter(|m| m.mode == "eval").map(|m| (m.episode, m.mean_reward)).collect()
    }

    pub fn metrics_jsonl(&self) -> String {
        self.metrics.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect()
    }
}

/// Seeds of the fixed evaluation episodes.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, STREAM_EVAL, i)).collect()
}

/// Mean log over greedy episodes with the given seeds. Never mutates `params`.
pub fn evaluate(
    scenario: &Scenario,
    settings: &EpisodeSettings,
    policy: Policy<'_>,
    seeds: &[u64],
) -> Result<Vec<EpisodeLog>, DqnError> {
    seeds.iter().map(|s| run_episode(scenario, settings, policy, None, 1, *s)).collect()
}

fn mean_components(logs: &[EpisodeLog]) -> RewardBreakdown {
    let n = logs.len().max(1) as f64;
    RewardBreakdown {
        preference: logs.iter().map(|l| l.components.preference).sum::<f64>() / n,
        time: logs.iter().map(|l| l.components.time).sum::<f64>() / n,
        flow: logs.iter().map(|l| l.components.flow).sum::<f64>() / n,
        total: logs.iter().map(|l| l.components.total).sum::<f64>() / n,
    }
}

/// Runs the schedule from `init`, evaluating at episode 0 and every
/// `eval_every` episodes, and keeps the best-evaluating parameters.
pub fn train(
    scenario: &Scenario,
    settings: &EpisodeSettings,
    schedule: &TrainSchedule,
    init: GnnParams,
    phase: Phase,
    seed: u64,
) -> Result<TrainOutcome, DqnError> {
    schedule.validate()?;
    let settings = EpisodeSettings { steps: schedule.steps_per_episode, ..settings.clone() };
    let mut learner = Learner::new(init, schedule, scenario.network.topology(), seed);
    let seeds = eval_seeds(seed, schedule.eval_episodes);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, GnnParams)> = None;

    let mut run_eval = |episode: usize, params: &GnnParams, metrics: &mut Vec<MetricsRecord>| -> Result<(), DqnError> {
        let logs = evaluate(scenario, &settings, Policy::Q { params, epsilon: 0.0 }, &seeds)?;
        let c = mean_components(&logs);
        metrics.push(MetricsRecord {
            episode,
            phase,
            mode: "eval".into(),
            mean_reward: c.total,
            components: c,
            epsilon: 0.0,
            loss: None,
            mean_delay: logs.iter().map(|l| l.mean_delay).sum::<f64>() / logs.len() as f64,
        });
        if best.as_ref().is_none_or(|(b, _, _)| c.total > *b) {
            best = Some((c.total, episode, params.clone()));
        }
        Ok(())
    };

    run_eval(0, &learner.online, &mut metrics)?;
    for episode in 0..schedule.episodes {
        let epsilon = schedule.epsilon(episode);
        let log = run_episode(
            scenario,
            &settings,
            Policy::Q { params: &learner.online.clone(), epsilon },
            Some(&mut learner),
            schedule.train_every,
            derive_seed(seed, STREAM_TRAIN, episode as u64),
        )?;
        metrics.push(MetricsRecord {
            episode: episode + 1,
            phase,
            mode: "train".into(),
            mean_reward: log.mean_reward,
            components: log.components,
            epsilon,
            loss: log.mean_loss,
            mean_delay: log.mean_delay,
        });
        if (episode + 1) % schedule.eval_every == 0 || episode + 1 == schedule.episodes {
            let params = learner.online.clone();
            run_eval(episode + 1, &params, &mut metrics)?;
        }
    }
    let (best_eval, best_episode, best) = best.expect("at least one evaluation");
    Ok(TrainOutcome { best, best_episode, best_eval, last: learner.online, metrics })
}

fn metadata(outcome: &TrainOutcome, phase: Phase, scenario: &str, settings: &EpisodeSettings, schedule: &TrainSchedule) -> TrainingMetadata {
    TrainingMetadata {
        phase,
        scenario: scenario.into(),
        episodes: schedule.episodes,
        best_episode: outcome.best_episode,
        best_eval_reward: outcome.best_eval,
        weights: settings.weights,
        k: settings.k,
    }
}

/// First phase: flow and time only.
pub fn train_generic(
    scenario: &Scenario,
    scenario_name: &str,
    settings: &EpisodeSettings,
    schedule: &TrainSchedule,
    gnn_config: &gnn::GnnConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainOutcome), DqnError> {
    if settings.weights.preference() != 0.0 {
        return Err(DqnError::Config(format!(
            "generic phase needs a zero preference weight, got {}",
            settings.weights.preference()
        )));
    }
    let settings = EpisodeSettings { preference: None, ..settings.clone() };
    let init = gnn::init(gnn_config)?;
    let outcome = train(scenario, &settings, schedule, init, Phase::Generic, seed)?;
    let meta = metadata(&outcome, Phase::Generic, scenario_name, &settings, schedule);
    Ok((Checkpoint::new("generic", &outcome.best, seed, meta, None), outcome))
}

/// Second phase: warm start from the generic model, full reward for one driver preference.
pub fn train_preference(
    generic: &Checkpoint,
    preference: PreferenceVector,
    scenario: &Scenario,
    scenario_name: &str,
    settings: &EpisodeSettings,
    schedule: &TrainSchedule,
    gnn_config: &gnn::GnnConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainOutcome), DqnError> {
    if !generic.is_generic() {
        return Err(DqnError::IncompatibleCheckpoint(format!("{} is not a generic checkpoint", generic.id)));
    }
    let same_shape = generic.config.layers == gnn_config.layers
        && generic.config.hidden == gnn_config.hidden
        && generic.config.features == gnn_config.features
        && generic.config.readout == gnn_config.readout
        && generic.config.activation == gnn_config.activation;
    if !same_shape {
        return Err(DqnError::IncompatibleCheckpoint(format!(
            "checkpoint network {:?} differs from configured {:?}",
            generic.config, gnn_config
        )));
    }
    if settings.weights.preference() <= 0.0 {
        return Err(DqnError::Config("preference phase needs a positive preference weight".into()));
    }
    let init = generic.params().map_err(|e| DqnError::IncompatibleCheckpoint(e.to_string()))?;
    let settings = EpisodeSettings { preference: Some(preference), ..settings.clone() };
    let outcome = train(scenario, &settings, schedule, init, Phase::Preference, seed)?;
    let meta = metadata(&outcome, Phase::Preference, scenario_name, &settings, schedule);
    let id = format!("dpm-{}", preference.label().replace(',', "-").replace('+', "plus"));
    Ok((Checkpoint::new(id, &outcome.best, seed, meta, Some(preference)), outcome))
}
