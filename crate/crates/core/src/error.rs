//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the latency model, trace I/O, policies, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation
    /// (nonpositive distance, empty latency vector, zero-norm similarity
    /// input, and the like).
    #[error("domain error: {0}")]
    Domain(String),

    /// A trace file is structurally malformed: bad magic, unsupported
    /// version or dtype, or a payload shorter than the header promises.
    #[error("trace format error: {0}")]
    Format(String),

    /// Structurally valid data with semantically invalid content, e.g.
    /// gating rows whose weights are negative or too far from summing to 1.
    #[error("validation error: {0}")]
    Validation(String),

    /// An inconsistent or incomplete configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A brute-force oracle refused an instance big enough to be
    /// intractable rather than silently grinding on it.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
