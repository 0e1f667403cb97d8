//! Versioned JSON container for trained Q-networks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::PreferenceVector;
use crate::gnn::{GnnConfig, GnnParams, ParamTree};
use crate::rewards::RewardWeights;

pub const FORMAT: &str = "pcroute-qnet";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Generic,
    Preference,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Generic => "generic",
            Phase::Preference => "preference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub phase: Phase,
    pub scenario: String,
    pub episodes: usize,
    pub best_episode: usize,
    pub best_eval_reward: f64,
    pub weights: RewardWeights,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub config: GnnConfig,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
    pub metadata: TrainingMetadata,
    /// `None` for the generic model
    pub preference: Option<PreferenceVector>,
}

impl Checkpoint {
    pub fn new(
        id: impl Into<String>,
        params: &GnnParams,
        seed: u64,
        metadata: TrainingMetadata,
        preference: Option<PreferenceVector>,
    ) -> Self {
        let tensors = params
            .tree
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| TensorRecord { name, shape, data: data.to_vec() })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            id: id.into(),
            config: params.config,
            seed,
            tensors,
            metadata,
            preference,
        }
    }

    pub fn is_generic(&self) -> bool {
        self.preference.is_none()
    }

    /// Rebuilds parameters, checking every tensor against the declared config.
    pub fn params(&self) -> Result<GnnParams, CheckpointError> {
        let mut params = crate::gnn::init(&self.config).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let expected: Vec<(String, Vec<usize>, usize)> =
            params.tree.tensors().into_iter().map(|(n, s, d)| (n, s, d.len())).collect();
        if expected.len() != self.tensors.len() {
            return Err(CheckpointError::Format(format!(
                "{} tensors, config implies {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, len), record) in expected.iter().zip(&self.tensors) {
            let fail = |reason: String| CheckpointError::Tensor { name: record.name.clone(), reason };
            if *name != record.name {
                return Err(fail(format!("expected tensor {name}")));
            }
            if *shape != record.shape || record.data.len() != *len {
                return Err(fail(format!("shape {:?} with {} values, expected {shape:?}", record.shape, record.data.len())));
            }
            if record.data.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite value".into()));
            }
        }
        for (slot, record) in params.tree.tensors_mut().into_iter().zip(&self.tensors) {
            slot.copy_from_slice(&record.data);
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(CheckpointError::Format(format!("missing format tag {FORMAT:?}")));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| CheckpointError::Format(e.to_string()))?;
        ckpt.params()?;
        Ok(ckpt)
    }

    /// Writes through a sibling temp file and a rename, so an interrupted
    /// write never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Shapes of a flattened parameter tree, for display.
pub fn describe(tree: &ParamTree) -> Vec<(String, Vec<usize>)> {
    tree.tensors().into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::init;

    fn meta() -> TrainingMetadata {
        TrainingMetadata {
            phase: Phase::Generic,
            scenario: "grid4x4".into(),
            episodes: 3,
            best_episode: 0,
            best_eval_reward: 0.5,
            weights: RewardWeights::generic(),
            k: 4,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = GnnConfig { hidden: 5, layers: 2, seed: 11, ..Default::default() };
        let p = init(&cfg).unwrap();
        let c = Checkpoint::new("generic", &p, 11, meta(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generic.json");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params().unwrap().tree, p.tree);
        assert!(!dir.path().join(".generic.json.tmp").exists());
    }

    #[test]
    fn preference_survives() {
        let p = init(&GnnConfig { hidden: 2, layers: 1, ..Default::default() }).unwrap();
        let c = Checkpoint::new("dpm", &p, 0, meta(), Some(PreferenceVector::two_lane_driver()));
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back.preference, Some(PreferenceVector::two_lane_driver()));
        assert!(!back.is_generic());
    }

    #[test]
    fn rejects_bad_containers() {
        let p = init(&GnnConfig { hidden: 2, layers: 1, ..Default::default() }).unwrap();
        let c = Checkpoint::new("g", &p, 0, meta(), None);

        let mut wrong_version = c.clone();
        wrong_version.version = 99;
        assert!(matches!(Checkpoint::from_json(&wrong_version.to_json()), Err(CheckpointError::Version(99))));

        let mut truncated = c.clone();
        truncated.tensors[0].data.pop();
        assert!(matches!(Checkpoint::from_json(&truncated.to_json()), Err(CheckpointError::Tensor { .. })));

        assert!(matches!(Checkpoint::from_json("{}"), Err(CheckpointError::Format(_))));
    }
}
