use thiserror::Error;

use crate::tensor::Shape;

/// Errors raised by the workspace arena.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArenaError {
    #[error("double free of workspace handle {0}")]
    DoubleFree(u64),
    #[error("unknown workspace handle {0}")]
    UnknownHandle(u64),
    #[error("workspace leak: {live} scalars still live after the measured operation")]
    Leak { live: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensor size overflows: {0:?}")]
    SizeOverflow(Shape),
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Shape, got: usize },
    #[error("attention over an empty key list")]
    EmptyKeys,
    #[error("empty attention stream")]
    EmptyStream,
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("chunk sizes must be at least 1")]
    InvalidChunkSize,
    #[error("standard deviation must be positive, got {0}")]
    InvalidStd(f64),
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

pub type Result<T, E = AttnError> = std::result::Result<T, E>;
