use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model or configuration invariant does not hold.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A state update would break non-negativity or conservation.
    #[error("invariant violation at step {step}: {reason}")]
    InvariantViolation { step: u64, reason: String },

    #[error("sample rejected: {0}")]
    SampleRejected(String),

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("wrong sample count for {kind}: expected {expected}, got {got}")]
    WrongSampleCount { kind: &'static str, expected: usize, got: usize },

    #[error("undefined normalization: true {0} is zero")]
    UndefinedNormalization(&'static str),

    #[error("invalid mu1: Lambda + mu1 * delta2 = {0} must be negative")]
    InvalidMu1(f64),

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParams(msg()))
    }
}
