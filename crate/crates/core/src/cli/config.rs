use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::ScheduleKind;
use crate::digest::config_hash;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::phantom::PhantomConfig;
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub cases: usize,
    pub split: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            cases: 50,
            split: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub schedule: ScheduleKind,
    pub base_lr: f64,
    pub epochs: usize,
    /// Share of training cases held out for per-epoch logging.
    pub validation_fraction: f64,
    /// Voxels added around the liver box before the cascade's tumor crop.
    pub cascade_margin: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            schedule: ScheduleKind::ThreeStage,
            base_lr: 1e-3,
            epochs: 20,
            validation_fraction: 0.1,
            cascade_margin: 2,
        }
    }
}

/// Everything a run depends on. Read from TOML; command-line flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threshold: f32,
    pub deterministic: bool,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            threshold: 0.5,
            deterministic: false,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            network: NetworkConfig::desk(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.training.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.network.validate()?;
        self.preprocess
            .check_network_divisibility(self.network.levels)
    }

    /// Hash of the fields that shape outputs; paths and the deterministic
    /// flag are left out.
    pub fn hash(&self) -> Result<String> {
        config_hash(&(
            self.seed,
            self.threshold,
            &self.dataset,
            &self.phantom,
            &self.preprocess,
            &self.network,
            &self.training,
        ))
    }
}
