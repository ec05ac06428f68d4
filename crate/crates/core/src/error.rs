//! Error type shared by every module.

use thiserror::Error;

/// Errors raised by the simulation, crypto, optimization and learning code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("underdetermined block: block length {block_len} < antennas {antennas}")]
    Underdetermined { block_len: usize, antennas: usize },

    #[error("singular block {block}: condition number {condition:.3e}")]
    SingularBlock { block: usize, condition: f64 },

    #[error("similarity undefined for zero-norm input")]
    UndefinedSimilarity,

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("equalization failed: {0}")]
    Equalization(String),

    #[error("model not initialized: {0}")]
    Uninitialized(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("sweep point {index} failed: {source}")]
    SweepPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
