use thiserror::Error;

/// Errors raised by model construction and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates an invariant (see `data::validate` for the full report).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Formula/configuration inconsistent with the data or with itself.
    #[error("configuration error: {0}")]
    Config(String),

    /// Parameter outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector/matrix dimensions do not match the model layout.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A non-finite quantity was produced; `unit`/`time` locate the offending cell
    /// (1-based, as in the data).
    #[error("numeric error at unit {unit}, time {time}: {msg}")]
    Numeric {
        unit: usize,
        time: usize,
        msg: String,
    },

    /// A simulated trajectory exceeded the explosion guard.
    #[error("simulation aborted: {0}")]
    Explosive(String),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, Error>;
