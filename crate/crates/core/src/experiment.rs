//! File-producing entry points behind the command-line tool.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint, Phase};
use crate::config::ExperimentConfig;
use crate::dqn::{self, derive_seed, Baseline, EpisodeLog, Policy};
use crate::driver::{self, PreferenceVector, SynthConfig};
use crate::network::{EdgeId, RoadNetwork};
use crate::paths;
use crate::rewards::RewardBreakdown;
use crate::scenarios::Scenario;
use crate::service::{self, ModelRegistry, RouteRequest};
use crate::Error;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    write_atomic(path, bytes).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_eval_reward: f64,
    pub best_episode: usize,
}

/// Trains one phase and writes `<id>.json` plus `metrics-<id>.jsonl` under `out`.
pub fn train_command(cfg: &ExperimentConfig, phase: Phase, out: &Path) -> Result<TrainReport, Error> {
    let scenario = cfg.scenario()?;
    let gnn = cfg.gnn_config();
    let (checkpoint, outcome) = match phase {
        Phase::Generic => {
            let settings = cfg.episode_settings(cfg.generic_weights, None);
            dqn::train_generic(&scenario, &cfg.scenario, &settings, &cfg.schedule, &gnn, cfg.seed).map_err(config_class)?
        }
        Phase::Preference => {
            let path = cfg
                .generic_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("generic checkpoint required for the preference phase".into()))?;
            let generic = Checkpoint::load(path)?;
            let p = cfg
                .preference_vector()?
                .ok_or_else(|| Error::Config("preference vector required for the preference phase".into()))?;
            let settings = cfg.episode_settings(cfg.preference_weights, Some(p));
            dqn::train_preference(&generic, p, &scenario, &cfg.scenario, &settings, &cfg.schedule, &gnn, cfg.seed)
                .map_err(config_class)?
        }
    };
    let ckpt_path = out.join(format!("{}.json", checkpoint.id));
    let metrics_path = out.join(format!("metrics-{}.jsonl", checkpoint.id));
    write_file(&metrics_path, outcome.metrics_jsonl().as_bytes())?;
    checkpoint.save(&ckpt_path)?;
    Ok(TrainReport {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        best_eval_reward: outcome.best_eval,
        best_episode: outcome.best_episode,
    })
}

fn config_class(e: dqn::DqnError) -> Error {
    match e {
        dqn::DqnError::Config(m) => Error::Config(m),
        dqn::DqnError::IncompatibleCheckpoint(m) => Error::Config(format!("incompatible checkpoint: {m}")),
        other => other.into(),
    }
}

/// Aggregate row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub episodes: usize,
    pub requests: usize,
    pub mean_reward: f64,
    pub components: RewardBreakdown,
    pub mean_delay: f64,
    pub median_delay: f64,
    pub alignment: Option<f64>,
    pub mean_occupancy: f64,
}

/// One point of the plot-ready per-episode series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub policy: String,
    pub episode: usize,
    pub step: usize,
    pub occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub policy: String,
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_delay: f64,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub seed: u64,
    pub policies: Vec<PolicySummary>,
    pub episodes: Vec<EpisodeRow>,
    pub series: Vec<SeriesRow>,
}

impl EvalReport {
    pub fn get(&self, policy: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == policy)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize_policy(name: &str, logs: &[EpisodeLog]) -> PolicySummary {
    let records: Vec<_> = logs.iter().flat_map(|l| &l.steps).collect();
    let n = records.len().max(1) as f64;
    let mut delays: Vec<f64> = records.iter().map(|r| r.actual_time - r.ideal_time).collect();
    let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| records.iter().map(|r| f(&r.reward)).sum::<f64>() / n;
    let components = RewardBreakdown {
        preference: mean(&|b| b.preference),
        time: mean(&|b| b.time),
        flow: mean(&|b| b.flow),
        total: mean(&|b| b.total),
    };
    let alignments: Vec<f64> = records.iter().filter_map(|r| r.alignment).collect();
    let occupancy: Vec<f64> = logs.iter().flat_map(|l| l.occupancy.iter().copied()).collect();
    PolicySummary {
        policy: name.into(),
        episodes: logs.len(),
        requests: records.len(),
        mean_reward: components.total,
        components,
        mean_delay: delays.iter().sum::<f64>() / n,
        median_delay: median(&mut delays),
        alignment: (!alignments.is_empty()).then(|| alignments.iter().sum::<f64>() / alignments.len() as f64),
        mean_occupancy: occupancy.iter().sum::<f64>() / occupancy.len().max(1) as f64,
    }
}

/// A named policy to compare.
pub enum PolicySpec {
    Model(Checkpoint),
    Baseline(Baseline),
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Model(c) => c.id.clone(),
            PolicySpec::Baseline(Baseline::ShortestDistance) => "shortest-distance".into(),
            PolicySpec::Baseline(Baseline::ShortestTime) => "shortest-time".into(),
        }
    }
}

/// Runs every policy on the same evaluation seeds.
pub fn compare_policies(cfg: &ExperimentConfig, policies: &[PolicySpec]) -> Result<EvalReport, Error> {
    let scenario = cfg.scenario()?;
    let preference = cfg.preference_vector()?;
    let weights = if preference.is_some() { cfg.preference_weights } else { cfg.generic_weights };
    let mut settings = cfg.episode_settings(weights, preference);
    settings.steps = cfg.eval.steps;
    let seeds = dqn::eval_seeds(cfg.seed, cfg.eval.episodes);
    let mut report =
        EvalReport { scenario: cfg.scenario.clone(), seed: cfg.seed, policies: vec![], episodes: vec![], series: vec![] };
    for spec in policies {
        let name = spec.name();
        let logs = match spec {
            PolicySpec::Model(c) => {
                let params = c.params()?;
                dqn::evaluate(&scenario, &settings, Policy::Q { params: &params, epsilon: 0.0 }, &seeds)?
            }
            PolicySpec::Baseline(b) => dqn::evaluate(&scenario, &settings, Policy::Baseline(*b), &seeds)?,
        };
        for (e, log) in logs.iter().enumerate() {
            report.episodes.push(EpisodeRow {
                policy: name.clone(),
                episode: e,
                mean_reward: log.mean_reward,
                mean_delay: log.mean_delay,
                alignment: log.mean_alignment,
            });
            for (s, occ) in log.occupancy.iter().enumerate() {
                report.series.push(SeriesRow { policy: name.clone(), episode: e, step: s, occupancy: *occ });
            }
        }
        report.policies.push(summarize_policy(&name, &logs));
    }
    Ok(report)
}

fn to_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.into_inner().map_err(|e| io_err(path, e))
}

/// Writes `eval.json`, `eval-episodes.csv` and `eval-series.csv` under `out`.
pub fn eval_command(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport, Error> {
    if cfg.eval.checkpoints.is_empty() && cfg.eval.baselines.is_empty() {
        return Err(Error::Config("nothing to evaluate: no checkpoints and no baselines".into()));
    }
    let mut specs = Vec::new();
    for path in &cfg.eval.checkpoints {
        specs.push(PolicySpec::Model(Checkpoint::load(path)?));
    }
    specs.extend(cfg.eval.baselines.iter().map(|b| PolicySpec::Baseline(*b)));
    let report = compare_policies(cfg, &specs)?;
    let table = serde_json::to_string_pretty(&serde_json::json!({
        "scenario": report.scenario,
        "seed": report.seed,
        "policies": report.policies,
    }))
    .expect("table serializes");
    write_file(&out.join("eval.json"), table.as_bytes())?;
    let episodes = out.join("eval-episodes.csv");
    write_file(&episodes, &to_csv(&report.episodes, &episodes)?)?;
    let series = out.join("eval-series.csv");
    write_file(&series, &to_csv(&report.series, &series)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandRow {
    pub t: f64,
    pub source: String,
    pub destination: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRow {
    pub t: f64,
    pub mean_rho: f64,
    pub arrivals: usize,
    pub on_network: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub vehicles: usize,
    pub arrived: usize,
    pub mean_travel_time: f64,
    pub peak_rho: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Seeded random demand: `rate` departures per second on average between
/// uniformly drawn distinct junctions.
pub fn random_demand(network: &RoadNetwork, duration: f64, rate: f64, seed: u64) -> Vec<DemandRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 21, 0));
    let n = network.num_junctions();
    let mut rows = Vec::new();
    if n < 2 {
        return rows;
    }
    let mut t = 0.0;
    while t < duration {
        let extra = usize::from(rng.gen::<f64>() < rate.fract());
        for _ in 0..rate.floor() as usize + extra {
            let s = rng.gen_range(0..n);
            let d = (s + 1 + rng.gen_range(0..n - 1)) % n;
            rows.push(DemandRow {
                t,
                source: network.junction(s).id.clone(),
                destination: network.junction(d).id.clone(),
            });
        }
        t += 1.0;
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub rows: Vec<SimulateRow>,
    pub summary: SimulateSummary,
    /// highest occupancy each edge reached, canonical edge order
    pub edge_peak: Vec<f64>,
}

/// Routes each departure on the current fastest path and steps the simulator
/// until the network drains or `drain_horizon` seconds pass after the last departure.
pub fn run_demand(scenario: &Scenario, demand: &[DemandRow], duration: f64, drain_horizon: f64) -> Result<SimulationRun, Error> {
    let network = scenario.network.clone();
    let mut demand = demand.to_vec();
    demand.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut sim = scenario.simulation(Default::default())?;
    let mut rows = Vec::new();
    let mut edge_peak = vec![0.0f64; network.num_edges()];
    let mut next = 0;
    let end = demand.last().map_or(0.0, |d| d.t).max(duration);
    let horizon = end + drain_horizon;
    let mut vehicles = 0;
    while (sim.time() < end || !sim.is_idle()) && sim.time() < horizon {
        while next < demand.len() && demand[next].t <= sim.time() {
            let d = &demand[next];
            let s = network.junction_index(&d.source)?;
            let t = network.junction_index(&d.destination)?;
            let route = if s == t {
                None
            } else {
                paths::shortest_path_by(&network, s, t, |e| sim.state().dynamics[e.0].travel_time)
            };
            if let Some(route) = route {
                sim.inject_vehicle(route, sim.time())?;
                vehicles += 1;
            }
            next += 1;
        }
        let state = sim.step();
        for (peak, d) in edge_peak.iter_mut().zip(&state.dynamics) {
            *peak = peak.max(d.occupancy);
        }
        let m = sim.metrics();
        rows.push(SimulateRow { t: m.t, mean_rho: m.mean_rho, arrivals: m.arrivals, on_network: sim.on_network_count() });
    }
    let times: Vec<f64> = sim.vehicles().iter().filter_map(|v| v.travel_time()).collect();
    let summary = SimulateSummary {
        vehicles,
        arrived: times.len(),
        mean_travel_time: times.iter().sum::<f64>() / times.len().max(1) as f64,
        peak_rho: rows.iter().map(|r| r.mean_rho).fold(0.0, f64::max),
    };
    Ok(SimulationRun { rows, summary, edge_peak })
}

/// Simulates a demand file (or seeded random demand), writing per-second
/// network metrics to `simulate.jsonl`.
pub fn simulate_command(cfg: &ExperimentConfig, out: &Path) -> Result<SimulateSummary, Error> {
    let scenario = cfg.scenario()?;
    let demand: Vec<DemandRow> = match &cfg.simulate.demand {
        Some(path) => read_csv(path)?,
        None => random_demand(&scenario.network, cfg.simulate.duration, cfg.simulate.rate, cfg.seed),
    };
    let run = run_demand(&scenario, &demand, cfg.simulate.duration, cfg.episode.drain_horizon)?;
    let jsonl: String = run.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect();
    write_file(&out.join("simulate.jsonl"), jsonl.as_bytes())?;
    let s = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
    write_file(&out.join("simulate-summary.json"), s.as_bytes())?;
    Ok(run.summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub driver: String,
    pub source: String,
    pub destination: String,
    #[serde(default)]
    pub preference: Option<String>,
    #[serde(default)]
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub request: RequestRow,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ideal_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_time: Option<f64>,
    pub latency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub requests: usize,
    pub errors: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn latency_summary(latencies: &[f64], errors: usize) -> LatencySummary {
    let mut s = latencies.to_vec();
    s.sort_by(f64::total_cmp);
    LatencySummary {
        requests: latencies.len(),
        errors,
        mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
        p50: percentile(&s, 50.0),
        p90: percentile(&s, 90.0),
        p99: percentile(&s, 99.0),
        max: s.last().copied().unwrap_or(0.0),
    }
}

/// Answers a batch of route requests against a checkpoint directory.
/// Failing requests produce an error row; the batch continues.
pub fn plan_command(
    cfg: &ExperimentConfig,
    registry_dir: &Path,
    requests: &Path,
    out: &Path,
) -> Result<(Vec<ResponseRow>, LatencySummary), Error> {
    let scenario = cfg.scenario()?;
    let network = &scenario.network;
    let registry = ModelRegistry::load_dir(registry_dir)?;
    let rows: Vec<RequestRow> = read_csv(requests)?;
    let state = network.free_flow_state();
    let mut responses = Vec::with_capacity(rows.len());
    let mut latencies = Vec::with_capacity(rows.len());
    let mut errors = 0;
    for row in rows {
        let start = Instant::now();
        let result = row
            .preference
            .as_deref()
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let mut v = PreferenceVector::parse(p)?;
                v.priority = cfg.priority;
                Ok::<_, driver::DriverError>(v)
            })
            .transpose()
            .map_err(Error::from)
            .and_then(|preference| {
                let request = RouteRequest {
                    driver: row.driver.clone(),
                    source: row.source.clone(),
                    destination: row.destination.clone(),
                    preference,
                    t: row.t,
                };
                Ok(service::plan_route(&registry, network, &state, &request, &cfg.service)?)
            });
        let latency = start.elapsed().as_secs_f64();
        latencies.push(latency);
        responses.push(match result {
            Ok(p) => ResponseRow {
                request: row,
                route: Some(p.route.iter().map(|e: &EdgeId| network.edge_key(*e)).collect()),
                model: Some(p.model.id),
                ideal_time: Some(p.ideal_time),
                predicted_time: Some(p.predicted_time),
                latency,
                error: None,
            },
            Err(e) => {
                errors += 1;
                ResponseRow {
                    request: row,
                    route: None,
                    model: None,
                    ideal_time: None,
                    predicted_time: None,
                    latency,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let summary = latency_summary(&latencies, errors);
    let jsonl: String = responses.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect();
    write_file(&out.join("responses.jsonl"), jsonl.as_bytes())?;
    let s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("plan-summary.json"), s.as_bytes())?;
    Ok((responses, summary))
}

/// Synthesizes a labeled trajectory history for the configured preference.
pub fn synth_command(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, Error> {
    let scenario = cfg.scenario()?;
    let mut truth = PreferenceVector::parse(&cfg.synth.preference)?;
    truth.priority = cfg.priority;
    if cfg.synth.traversals == 0 {
        return Err(Error::Config("synth traversals must be at least 1".into()));
    }
    let samples = driver::synthesize_history(
        &scenario.network,
        &truth,
        &SynthConfig {
            traversals: cfg.synth.traversals,
            noise: cfg.synth.noise,
            samples_per_traversal: cfg.synth.samples_per_traversal,
            seed: cfg.seed,
        },
    );
    let mut buf = Vec::new();
    driver::write_trajectories(&mut buf, &samples)?;
    let path = out.join("trajectories.csv");
    write_file(&path, &buf)?;
    Ok(path)
}

/// Human-readable summary of a checkpoint file.
pub fn inspect_checkpoint(path: &Path) -> Result<serde_json::Value, Error> {
    let c = Checkpoint::load(path)?;
    let tensors: Vec<_> = c.tensors.iter().map(|t| serde_json::json!({ "name": t.name, "shape": t.shape })).collect();
    Ok(serde_json::json!({
        "id": c.id,
        "format": c.format,
        "version": c.version,
        "seed": c.seed,
        "config": c.config,
        "parameters": c.config.parameter_count(),
        "preference": c.preference.map(|p| p.label()),
        "metadata": c.metadata,
        "tensors": tensors,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 99.0), 10.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn preference_phase_needs_generic_checkpoint() {
        let cfg = ExperimentConfig::from_toml("scenario = \"grid4x4\"\nseed = 1\npreference = \"straight,two,simple,low\"\n")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train_command(&cfg, Phase::Preference, dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("generic checkpoint required")), "{err}");
    }
}
