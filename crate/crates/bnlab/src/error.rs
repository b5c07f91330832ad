use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message carries both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// An operation that needs at least one example saw none.
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    /// Training-mode normalization needs more examples than it got.
    #[error("batch too small in {op}: need at least {need} values, got {got}")]
    BatchTooSmall {
        op: &'static str,
        need: usize,
        got: usize,
    },

    /// A NaN or infinity showed up where the library requires finite values.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Invalid configuration or hyperparameter.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called in the wrong mode or before required state existed.
    #[error("state error: {0}")]
    State(String),

    /// Malformed data file (IDX, checkpoint, config file).
    #[error("format error: {0}")]
    Format(String),

    /// A verification command found a deviation beyond tolerance.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn dim2(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Dim {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
