//! Experiment configuration: one TOML document with strict keys.

use std::path::{Path, PathBuf};

use nowcast_core::model::TrainConfig;
use nowcast_core::synth::SynthConfig;
use nowcast_core::tensor::OptimizerKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            model: "model/model.nwm".into(),
            report_dir: "report".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    /// Oversampling window shift in pixels.
    pub k: u8,
    pub train_events: usize,
    pub test_events: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            k: 1,
            train_events: 5,
            test_events: 2,
        }
    }
}

/// Training hyperparameters. The seed is not configurable here: it is derived
/// from the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub conv_channels: [usize; 4],
    pub fc_hidden: usize,
    pub lstm_hidden: usize,
    pub patience: usize,
    pub samples_per_epoch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainOptions {
            epochs: 12,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            conv_channels: t.conv_channels,
            fc_hidden: t.fc_hidden,
            lstm_hidden: t.lstm_hidden,
            patience: t.patience,
            samples_per_epoch: 640,
        }
    }
}

impl TrainOptions {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            conv_channels: self.conv_channels,
            fc_hidden: self.fc_hidden,
            lstm_hidden: self.lstm_hidden,
            seed,
            patience: self.patience,
            samples_per_epoch: self.samples_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of synthetic events.
    pub events: usize,
    /// Probability threshold for reported categorical scores.
    pub threshold: f64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub pipeline: PipelineOptions,
    pub train: TrainOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            events: 7,
            threshold: 0.5,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            pipeline: PipelineOptions::default(),
            train: TrainOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(CliError::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if !(1..=2).contains(&self.pipeline.k) {
            return Err(CliError::Config(format!("pipeline.k must be 1 or 2, got {}", self.pipeline.k)));
        }
        self.train.to_train_config(0).validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Short form of [`hash`](Self::hash) embedded in artifacts.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

/// Seed for one stage, derived from the global seed by hashing the stage name.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(global.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
