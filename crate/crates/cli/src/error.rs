use std::path::PathBuf;

use nowcast_core::NowcastError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] NowcastError),

    /// Existing outputs were produced by a different configuration.
    #[error(
        "{stage}: outputs under {} come from a different configuration \
         (recorded {recorded}, current {current}); rerun with --force to overwrite",
        dir.display()
    )]
    Stale {
        stage: &'static str,
        dir: PathBuf,
        recorded: String,
        current: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(NowcastError::Io(e))
    }
}

impl CliError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ (CliError::Stage { .. } | CliError::Stale { .. }) => e,
            e => CliError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 for configuration and usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Stale { .. } => 2,
            CliError::Core(NowcastError::Config(_) | NowcastError::Usage(_)) => 2,
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
