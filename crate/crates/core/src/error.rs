use thiserror::Error;

use crate::project::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength {
        len: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid N:M pattern {n}:{m} (need 1 <= m < n)")]
    InvalidPattern { n: usize, m: usize },

    #[error("{cols} columns are not divisible by group length {n}")]
    Indivisible { cols: usize, n: usize },

    #[error("invalid bit width {0} (need 2..=16)")]
    InvalidBits(u32),

    #[error("quantization scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("scale is undefined for an all-zero group")]
    ZeroGroup,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("constraint set must contain a sparsity pattern, a quantizer, or both")]
    EmptyConstraint,

    #[error("constraint violated: {0}")]
    Infeasible(Violation),

    #[error("no configuration reaches compression ratio {0}")]
    UnattainableConstraint(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Decoding failures for checkpoint and dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed data: {0}")]
    Malformed(String),
}
