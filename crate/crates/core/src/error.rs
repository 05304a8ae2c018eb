use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix or image")]
    Empty,

    #[error("expected {expected} channel(s), found {found}")]
    ChannelCount { expected: usize, found: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength {
        len: usize,
        shape: (usize, usize, usize),
    },

    #[error("threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factor index {k} outside 1..={count}")]
    FactorIndex { k: usize, count: usize },

    #[error("degenerate factor stack: factor means sum to zero")]
    DegenerateStack,

    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("SVD did not converge on a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("checkpoint format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::SvdNoConvergence { .. } | Error::DegenerateStack
        )
    }
}
