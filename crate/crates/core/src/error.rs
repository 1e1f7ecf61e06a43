use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector of length {len} cannot be reshaped into {rows} rows")]
    NonDivisibleDimension { len: usize, rows: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("non-finite entry at position {0}")]
    NonFiniteEntry(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("collective length mismatch: rank {rank} sent {actual} entries, rank 0 sent {expected}")]
    LengthMismatch {
        rank: usize,
        expected: usize,
        actual: usize,
    },

    #[error("malformed wire message: {0}")]
    Protocol(String),

    #[error(
        "communication audit failed for {method} on rank {rank}: expected {expected} entries, observed {observed}"
    )]
    AuditMismatch {
        method: String,
        rank: usize,
        expected: u64,
        observed: u64,
    },

    #[error("iterate became non-finite at step {step}")]
    NonFiniteIterate { step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }
}
