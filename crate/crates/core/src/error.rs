use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Diagnostics attached to a quadrature that did not reach its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureFailure {
    pub estimate: f64,
    pub abs_error: f64,
    pub evaluations: usize,
    pub intervals: usize,
    pub reason: String,
}

impl fmt::Display for QuadratureFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (estimate {:e}, error {:e}, {} evaluations over {} intervals)",
            self.reason, self.estimate, self.abs_error, self.evaluations, self.intervals
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("kernel is singular at {0}")]
    Singular(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("matrix is not positive semidefinite: pivot {pivot} failed with jitter {jitter:e}")]
    NotPositiveSemidefinite { pivot: usize, jitter: f64 },

    #[error("quadrature failed: {0}")]
    Quadrature(QuadratureFailure),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Whether the error stems from user input rather than from the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidParams(_) | Error::UnsupportedRegime(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
