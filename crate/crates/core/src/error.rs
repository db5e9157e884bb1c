use std::io;

use thiserror::Error;

/// Errors surfaced by the kfc pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not diagonalizable (condition estimate {condition:.3e} exceeds {threshold:.3e})")]
    NonDiagonalizable { condition: f64, threshold: f64 },

    #[error("commutant is empty after deflation")]
    EmptyCommutant,

    #[error("unstable system: spectral radius {radius:.4} exceeds {limit}")]
    Unstable { radius: f64, limit: f64 },

    #[error("non-finite loss at {context}: {detail}")]
    NonFiniteLoss { context: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("i/o error at tuple {index}: {source}")]
    TupleIo {
        index: usize,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
