use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{what} = {value} lies outside the domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The kernel or Vandermonde system is singular to working precision.
    /// Callers of the RBF path are expected to fall back to Adams coefficients.
    #[error("linear system is singular to working precision (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("non-finite state encountered at step {step}")]
    NonFinite { step: usize },

    #[error("insufficient history: need {needed} evaluations, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("reference oracle failed its self-consistency check: {0}")]
    Oracle(String),

    #[error("model evaluation counter mismatch: expected {expected}, counted {counted}")]
    CounterMismatch { expected: usize, counted: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
