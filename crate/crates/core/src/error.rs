//! Shared error type for every module in the crate.
//!
//! One enum keeps the CLI exit-code mapping and the FFI status-code mapping
//! in a single place. Variants carry human-readable context; callers that
//! need to branch do so on the variant, not the message.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Input values violate a data precondition (non-finite entries,
    /// negative values where non-negative are required, malformed files).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    /// A configuration value is out of its documented range, or a config
    /// file failed to parse (unknown keys are rejected).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A linear system that must be invertible is numerically singular.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// A numerical routine failed to produce a finite, usable result
    /// (eigendecomposition failure, non-finite loss, Cholesky failure
    /// after jitter escalation).
    #[error("numerical failure: {0}")]
    NumericalError(String),

    /// A reference optimizer made no progress or its loss increased for
    /// too many consecutive steps.
    #[error("oracle diverged: {0}")]
    OracleDiverged(String),

    /// A problem instance exceeds the documented desk-scale guard.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// A required input file does not exist.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// The requested quantity has no defined value for the given input
    /// (e.g. AUC with a single label class).
    #[error("undefined: {0}")]
    Undefined(String),

    /// Filesystem failure while reading or writing run artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config error, 3 missing input,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::MissingInput(_) => 3,
            Error::SingularSystem(_)
            | Error::NumericalError(_)
            | Error::OracleDiverged(_) => 4,
            _ => 1,
        }
    }
}
