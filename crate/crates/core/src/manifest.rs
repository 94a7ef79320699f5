//! Everything needed to repeat a training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Architecture of the final network, as given on the command line.
    pub arch: String,
    /// Earlier pre-training stages, in order; empty for plain training.
    #[serde(default)]
    pub pretrain_stages: Vec<String>,
    pub train_data: PathBuf,
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    pub seed: u64,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(arch: impl Into<String>, train_data: impl Into<PathBuf>, config: TrainConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            arch: arch.into(),
            pretrain_stages: Vec::new(),
            train_data: train_data.into(),
            val_data: None,
            seed: config.seed,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed != self.config.seed {
            return Err(Error::Config(format!(
                "manifest seed {} disagrees with config seed {}",
                self.seed, self.config.seed
            )));
        }
        self.config.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunManifest> {
        let m: RunManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        RunManifest::from_json(&fs::read_to_string(path)?)
    }
}
