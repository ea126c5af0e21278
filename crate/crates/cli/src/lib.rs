//! Command-line driver for the nowcasting experiment: `synth`, `prepare`,
//! `train`, `eval` and `all`, with stage caching keyed by configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{cmd_all, cmd_eval, cmd_prepare, cmd_synth, cmd_train, Context, StageOutcome};
pub use config::{stage_seed, ExperimentConfig};
pub use error::{CliError, CliResult};
