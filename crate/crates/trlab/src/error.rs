//! Crate-wide error type, mapped onto CLI exit codes by the runner.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or schema violation. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Linear-solve or other numerical failure. Exit code 3.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Enumeration exceeded the configured hard cap. Exit code 4.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Operation called outside its precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A sampled estimator had nothing to estimate from.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Stage-0 alignment did not reach its KL target; carries the achieved
    /// probe KL.
    #[error("alignment failed: probe KL {achieved} > target {target} after {steps} steps")]
    AlignmentFailed {
        achieved: f64,
        target: f64,
        steps: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::Numerical(_) => 3,
            Error::Capacity(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
