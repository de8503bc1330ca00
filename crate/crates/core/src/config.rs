//! Run configuration shared by the command-line tools.
//!
//! A config file is a JSON object with optional `seed`, `synth`, `model`,
//! `train` and `tracker` sections; omitted fields take their defaults and
//! unknown keys are rejected. Command-line flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set, every section seed is derived from it.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
}

/// Stable sub-seed derivation (SplitMix64 finaliser over `seed + tag`).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SYNTH_TAG: u64 = 1;
const MODEL_TAG: u64 = 2;
const TRAIN_TAG: u64 = 3;

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Load `path` if given, else defaults; then apply the seed override and derive sub-seeds.
    pub fn resolve(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if seed_override.is_some() {
            cfg.seed = seed_override;
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = derive_seed(s, SYNTH_TAG);
            self.model.seed = derive_seed(s, MODEL_TAG);
            self.train.seed = derive_seed(s, TRAIN_TAG);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let cfg =
            RunConfig::parse(r#"{"train": {"epochs": 3}, "tracker": {"update_interval": 10}}"#, Path::new("c.json"))
                .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(cfg.tracker.update_interval, 10);
        assert_eq!(cfg.model, ModelConfig::desk());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::parse(r#"{"train": {"epoch": 3}}"#, Path::new("c.json")).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(RunConfig::parse(r#"{"trian": {}}"#, Path::new("c.json")).is_err());
    }

    #[test]
    fn master_seed_drives_every_section() {
        let a = RunConfig::resolve(None, Some(5)).unwrap();
        let b = RunConfig::resolve(None, Some(5)).unwrap();
        let c = RunConfig::resolve(None, Some(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.synth.seed, c.synth.seed);
        assert_ne!(a.synth.seed, a.model.seed);
        assert_ne!(a.model.seed, a.train.seed);
    }

    #[test]
    fn missing_file_is_reported() {
        let e = RunConfig::resolve(Some(Path::new("/nonexistent/cfg.json")), None).unwrap_err();
        assert!(matches!(e, Error::MissingFile(_)));
    }
}
