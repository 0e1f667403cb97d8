//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dqn::{Baseline, EpisodeSettings, RewardTime, TrainSchedule};
use crate::driver::{PreferenceVector, PriorityMask};
use crate::gnn::{Activation, GnnConfig, Readout};
use crate::rewards::{AttributeWeights, RewardWeights};
use crate::scenarios::Scenario;
use crate::service::ServiceConfig;
use crate::sim::SimConfig;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnSection {
    pub layers: usize,
    pub hidden: usize,
    pub readout: Readout,
    pub epsilon_learnable: bool,
    pub activation: Activation,
}

impl Default for GnnSection {
    fn default() -> Self {
        let d = GnnConfig::default();
        Self {
            layers: d.layers,
            hidden: d.hidden,
            readout: d.readout,
            epsilon_learnable: d.epsilon_learnable,
            activation: d.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub step_seconds: f64,
    pub background_per_step: usize,
    pub drain_horizon: f64,
    pub congestion_threshold: f64,
    pub reward_time: RewardTime,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let d = EpisodeSettings::default();
        Self {
            step_seconds: d.step_seconds,
            background_per_step: d.background_per_step,
            drain_horizon: d.drain_horizon,
            congestion_threshold: d.congestion_threshold,
            reward_time: d.reward_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub baselines: Vec<Baseline>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 5,
            steps: 150,
            checkpoints: Vec::new(),
            baselines: vec![Baseline::ShortestDistance, Baseline::ShortestTime],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// CSV with `t,source,destination`; random demand when absent
    pub demand: Option<PathBuf>,
    pub duration: f64,
    /// random departures per second when no demand file is given
    pub rate: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { demand: None, duration: 600.0, rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub preference: String,
    pub traversals: usize,
    pub noise: f64,
    pub samples_per_traversal: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { preference: "straight,two,simple,low".into(), traversals: 200, noise: 0.0, samples_per_traversal: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// bundled scenario name or path to a network JSON file
    pub scenario: String,
    #[serde(default)]
    pub lights: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub gnn: GnnSection,
    #[serde(default)]
    pub episode: EpisodeSection,
    #[serde(default = "RewardWeights::generic")]
    pub generic_weights: RewardWeights,
    #[serde(default = "RewardWeights::personalized")]
    pub preference_weights: RewardWeights,
    #[serde(default)]
    pub attribute_weights: AttributeWeights,
    /// driver preference for the preference phase and alignment statistics
    #[serde(default)]
    pub preference: Option<String>,
    #[serde(default)]
    pub priority: PriorityMask,
    /// generic checkpoint to warm-start the preference phase from
    #[serde(default)]
    pub generic_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub service: ServiceConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub synth: SynthSection,
}

fn default_k() -> usize {
    4
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it, `out` included, resolve
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if Scenario::builtin(&self.scenario).is_none() && Path::new(&self.scenario).is_relative() {
            self.scenario = base.join(&self.scenario).display().to_string();
        }
        self.out.iter_mut().for_each(fix);
        self.lights.iter_mut().for_each(fix);
        self.generic_checkpoint.iter_mut().for_each(fix);
        self.eval.checkpoints.iter_mut().for_each(fix);
        self.simulate.demand.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gnn_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if Scenario::builtin(&self.scenario).is_none() && !Path::new(&self.scenario).exists() {
            return Err(Error::Config(format!("scenario {} is neither bundled nor an existing file", self.scenario)));
        }
        let files = self.lights.iter().chain(&self.eval.checkpoints).chain(&self.simulate.demand);
        for f in files {
            if !f.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", f.display())));
            }
        }
        if let Some(p) = &self.preference {
            PreferenceVector::parse(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        PreferenceVector::parse(&self.synth.preference).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.synth.noise) {
            return Err(Error::Config(format!("synth noise {} outside [0, 1]", self.synth.noise)));
        }
        if !(self.episode.step_seconds > 0.0) || !(self.episode.drain_horizon >= 0.0) {
            return Err(Error::Config("episode step_seconds must be positive and drain_horizon non-negative".into()));
        }
        if self.eval.episodes == 0 || self.eval.steps == 0 {
            return Err(Error::Config("eval episodes and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario, Error> {
        Scenario::resolve(&self.scenario, self.lights.as_deref())
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            layers: self.gnn.layers,
            hidden: self.gnn.hidden,
            readout: self.gnn.readout,
            epsilon_learnable: self.gnn.epsilon_learnable,
            activation: self.gnn.activation,
            features: crate::network::FEATURE_COUNT,
            seed: self.seed,
        }
    }

    pub fn preference_vector(&self) -> Result<Option<PreferenceVector>, Error> {
        self.preference
            .as_deref()
            .map(|p| {
                let mut v = PreferenceVector::parse(p).map_err(|e| Error::Config(e.to_string()))?;
                v.priority = self.priority;
                Ok(v)
            })
            .transpose()
    }

    pub fn episode_settings(&self, weights: RewardWeights, preference: Option<PreferenceVector>) -> EpisodeSettings {
        EpisodeSettings {
            k: self.k,
            weights,
            attribute_weights: self.attribute_weights,
            preference,
            congestion_threshold: self.episode.congestion_threshold,
            steps: self.schedule.steps_per_episode,
            step_seconds: self.episode.step_seconds,
            background_per_step: self.episode.background_per_step,
            drain_horizon: self.episode.drain_horizon,
            reward_time: self.episode.reward_time,
            sim: SimConfig::default(),
        }
    }

    /// Output directory: the flag wins over the file, then `runs/`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf).or_else(|| self.out.clone()).unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("scenario = \"grid4x4\"\nseed = 7\n").unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.schedule, TrainSchedule::default());
        assert_eq!(c.generic_weights, RewardWeights::generic());
        assert_eq!(c.gnn_config().seed, 7);
    }

    #[test]
    fn seed_is_required() {
        assert!(matches!(ExperimentConfig::from_toml("scenario = \"grid4x4\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let text = "scenario = \"grid4x4\"\nseed = 1\n[generic_weights]\npreference = 0.0\ntime = 0.5\nflow = 0.3\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_and_files_rejected() {
        assert!(ExperimentConfig::from_toml("scenario = \"grid4x4\"\nseed = 1\nbogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("scenario = \"no/such/net.json\"\nseed = 1\n").is_err());
        let text = "scenario = \"grid4x4\"\nseed = 1\n[eval]\ncheckpoints = [\"missing.json\"]\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
scenario = "grid4x4-trap"
seed = 3
k = 3
preference = "straight,one,simple,low"

[schedule]
episodes = 10
optimizer = "adam"

[gnn]
layers = 2
hidden = 8
readout = "sum"

[episode]
background_per_step = 2

[eval]
baselines = ["shortest-distance"]
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.schedule.episodes, 10);
        assert_eq!(c.gnn_config().readout, Readout::Sum);
        assert_eq!(c.episode.background_per_step, 2);
        assert_eq!(c.eval.baselines, vec![Baseline::ShortestDistance]);
        assert_eq!(c.preference_vector().unwrap(), Some(PreferenceVector::one_lane_driver()));
    }
}
