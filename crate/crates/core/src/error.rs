use thiserror::Error;

#[derive(Debug, Error)]
pub enum NowcastError {
    /// A tensor or block did not have the extent an operation expects.
    #[error("dimension error on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("truncated payload at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NowcastError> = std::result::Result<T, E>;

impl NowcastError {
    pub(crate) fn dim(axis: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        NowcastError::Dimension {
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
