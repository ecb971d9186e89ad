//! The merged run configuration read by the command-line driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitConfig;
use crate::error::{config_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::ModelConfig;
use crate::train::TrainConfig;

/// Upper bounds enforced by config validation. They sit far above any
/// practical model and keep size arithmetic and allocations bounded for
/// untrusted config files and checkpoints.
pub mod limits {
    pub const MAX_CHANNELS: usize = 4096;
    pub const MAX_STAGES: usize = 8;
    pub const MAX_BLOCKS_PER_STAGE: usize = 64;
    pub const MAX_EXPANSION: usize = 16;
    pub const MAX_KERNEL: usize = 15;
    pub const MAX_STEM_PATCH: usize = 32;
    pub const MAX_SCALING_COEFF: f64 = 8.0;
    pub const MAX_IMAGE_SIZE: usize = 2048;
    pub const MAX_CLASSES: usize = 1000;
}

/// File name of the effective configuration echoed into output directories.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Everything a run needs apart from its output location.
///
/// A config file is a JSON document with any subset of these fields; missing
/// fields take their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root containing one directory per class.
    pub data: Option<PathBuf>,
    /// Seeds the stratified split.
    pub split_seed: u64,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            split_seed: 42,
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => config_err!("{}: {msg}", path.display()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies one global seed to the split, the weight initialization and
    /// the batch shuffle.
    pub fn set_seed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Writes [`RESOLVED_CONFIG_FILE`] into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(RESOLVED_CONFIG_FILE);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}
