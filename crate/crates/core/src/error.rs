use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. The CLI maps `Numerical` to exit code 3 and
/// everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("need more than {need} points, have {have}")]
    InsufficientPoints { have: usize, need: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate point at the sensor origin")]
    DegeneratePoint,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("image kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: &'static str, got: String },

    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("step {t} outside [1, {max}]")]
    Step { t: usize, max: usize },

    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("need at least {need} samples, have {have}")]
    InsufficientSamples { have: usize, need: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
