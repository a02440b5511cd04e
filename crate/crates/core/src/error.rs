//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("sequence too long: {0}")]
    TooLong(String),

    /// NaN/Inf produced by a tape operation. Aborts the step rather than
    /// letting the value propagate.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint integrity error at byte {offset}: {detail}")]
    Integrity { offset: u64, detail: String },

    #[error("checkpoint config mismatch:\n{0}")]
    ConfigMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors a user can fix by editing a config or command line, as opposed
    /// to runtime failures. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidParameter(_))
    }
}
