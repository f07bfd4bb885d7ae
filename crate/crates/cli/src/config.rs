//! Versioned run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taskblock::adversary::AttackConfig;
use taskblock::data::{SynthConfig, DEFAULT_SPLIT};
use taskblock::mlac::BlockingConfig;
use taskblock::models::{Activation, Architecture};
use taskblock::train::SupervisedConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: SupervisedConfig,
    #[serde(default)]
    pub finetune: SupervisedConfig,
    #[serde(default)]
    pub blocking: BlockingConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Used by `gen-data`.
    pub synthetic: SynthConfig,
    /// Bag-of-words width for JSONL records that carry `text`.
    pub hash_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: SynthConfig::default(), hash_dim: 1024 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: DEFAULT_SPLIT.0, val: DEFAULT_SPLIT.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dims: vec![64, 64, 32], activation: Activation::Tanh, seed: 1 }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let message = if at == "." { e.inner().to_string() } else { format!("{at}: {}", e.inner()) };
            ConfigError::Parse { path: path.to_string(), message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: shown.clone(), source })?;
        Self::parse(&text, &shown)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: taskblock::Error| ConfigError::Invalid(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!("version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.data.synthetic.validate().map_err(invalid)?;
        if self.data.hash_dim == 0 {
            return Err(ConfigError::Invalid("data.hash_dim must be positive".into()));
        }
        let s = &self.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.train + s.val < 1.0) {
            return Err(ConfigError::Invalid(format!("split fractions train={} val={} leave no eval split", s.train, s.val)));
        }
        Architecture::new(self.model.dims.clone(), self.model.activation).map_err(invalid)?;
        for (name, sup) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if sup.batch == 0 || !(sup.lr > 0.0 && sup.lr.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name}: batch and lr must be positive")));
            }
        }
        self.blocking.validate().map_err(invalid)?;
        self.attack.space.validate().map_err(invalid)?;
        if self.attack.n_grid.is_empty() || self.attack.n_grid.contains(&0) || self.attack.seeds < 2 || self.attack.trials == 0 {
            return Err(ConfigError::Invalid("attack: needs nonzero n values, seeds >= 2 and trials >= 1".into()));
        }
        Ok(())
    }

    pub fn to_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the fully resolved configuration.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    /// Hash of the parts that determine an attack's inputs and protocol, so
    /// reports from differently trained checkpoints stay comparable.
    pub fn attack_hash(&self) -> String {
        sha256_json(&(&self.data, &self.split, &self.attack))
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = RunConfig::parse(r#"{"version": 1}"#, "t").unwrap();
        assert_eq!(cfg.model.dims, vec![64, 64, 32]);
        assert_eq!(cfg.blocking.k_max, 16);
        assert_eq!(cfg.attack.trials, 50);
        let again = RunConfig::parse(&cfg.to_pretty(), "t").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse(r#"{"version": 1, "blocking": {"k_maxx": 3}}"#, "t").unwrap_err().to_string();
        assert!(err.contains("blocking") && err.contains("k_maxx"), "{err}");
        let err = RunConfig::parse(r#"{"version": 1, "data": {"synthetic": {"input_dim": 64}}}"#, "t").unwrap_err().to_string();
        assert!(err.contains("num_desired_classes"), "{err}");
        let err = RunConfig::parse(r#"{"model": {}}"#, "t").unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(RunConfig::parse(r#"{"version": 2}"#, "t").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse(r#"{"version": 1}"#, "t").unwrap();
        let b = RunConfig::parse(r#"{"version": 1, "blocking": {"seed": 3}}"#, "t").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.attack_hash(), b.attack_hash());
    }
}
