//! Error type shared across the crate.
//!
//! The CLI maps these variants onto exit codes: configuration problems exit
//! with 2, data/parse problems with 3, and violated internal invariants
//! (including non-finite losses) with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Feature list violates the non-increasing spatial-size ordering.
    #[error("stage ordering error: {0}")]
    Ordering(String),

    /// Bad configuration value or missing required configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset or checkpoint content problem.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed line in a text file.
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// An internal invariant did not hold; the run must abort.
    #[error("invariant failure: {0}")]
    Invariant(String),

    /// A loss component became non-finite; training aborts naming it.
    #[error("training aborted: loss component {component} is non-finite")]
    NonFinite { component: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
