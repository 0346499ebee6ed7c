//! Run configuration (TOML), validation and content hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LogFormat;
use crate::error::{Result, TipsError};
use crate::eval::EvalProtocol;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::simulator::WorldSpec;
use crate::train::{CounterfactualConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction log to ingest.
    pub path: Option<PathBuf>,
    pub format: LogFormat,
    /// Keep this fraction of users (chosen with the global seed); 1 keeps all.
    pub user_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            format: LogFormat::movielens(),
            user_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub counterfactual: CounterfactualConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataConfig::default(),
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            counterfactual: CounterfactualConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TipsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TipsError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TipsError::Config(msg) => TipsError::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| TipsError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.format.validate()?;
        if !(self.data.user_fraction > 0.0 && self.data.user_fraction <= 1.0) {
            return Err(TipsError::Config("data.user_fraction must lie in (0, 1]".into()));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.counterfactual.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    fn canonical_json(value: &impl Serialize) -> String {
        serde_json::to_string(value).expect("config serialises")
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> String {
        sha256_hex(Self::canonical_json(self).as_bytes())
    }

    /// Hash of everything that determines trained parameters (the
    /// evaluation protocol is excluded).
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.eval = EvalProtocol::default();
        sha256_hex(Self::canonical_json(&c).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Mode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[objective]\nmode = \"no-time\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.objective.mode, Mode::NoTime);
        assert_eq!(c.objective.gamma, 0.3);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 7\n").is_err());
        assert!(RunConfig::from_toml("[model]\ndims = 3\n").is_err());
        assert!(RunConfig::from_toml("[objective]\nepsilon = 0.7\n").is_err());
    }

    #[test]
    fn eval_changes_config_hash_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.lr *= 2.0;
        assert_ne!(a.training_hash(), b.training_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
