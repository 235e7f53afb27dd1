//! Pipeline configuration, read from TOML; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::PhantomSpec;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::{build_spec, NetworkSpec, RfVariant};
use crate::optim::AdamConfig;
use crate::preprocess::AugmentationConfig;
use crate::roi;
use crate::volume::Spacing;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub rf_variant: RfVariant,
    pub channels: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            rf_variant: RfVariant::Rf64,
            channels: [48, 96, 192],
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, seed: u64) -> NetworkSpec {
        build_spec(self.rf_variant, self.channels, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_cases: usize,
    /// Spacing every volume is resampled to before entering the network.
    pub target_spacing: Spacing,
    /// Cases held out of `train` for the final evaluation, taken from the end.
    pub holdout: usize,
    /// Fraction of training cases used for early stopping and checkpointing.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_cases: 20,
            target_spacing: [4.0, 1.0, 1.0],
            holdout: 4,
            val_fraction: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub threshold: f32,
    pub min_voxels: usize,
    pub margin: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            threshold: roi::DEFAULT_THRESHOLD,
            min_voxels: roi::DEFAULT_MIN_VOXELS,
            margin: roi::DEFAULT_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_max_epochs: usize,
    /// Phase 1 stops after this many evaluations without improvement.
    pub phase1_patience: usize,
    pub phase2_epochs: usize,
    /// Locator validation Dice above which predicted boxes replace
    /// annotation-derived ones in phase 2.
    pub teacher_forcing_dice: f64,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_max_epochs: 100,
            phase1_patience: 5,
            phase2_epochs: 50,
            teacher_forcing_dice: 0.3,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub k: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { k: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub roi: RoiConfig,
    pub train: TrainConfig,
    pub crossval: CrossvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.data.val_fraction)));
        }
        if self.train.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.crossval.k == 0 {
            return Err(Error::Config("crossval.k must be at least 1".into()));
        }
        Ok(())
    }
}
