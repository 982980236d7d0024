use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index:?} out of range for shape {dims:?}")]
    IndexOutOfRange { index: Vec<usize>, dims: Vec<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("element count {count} exceeds cap {cap}")]
    SizeCap { count: u128, cap: u128 },

    #[error("dimension {dim} has size {size}, not a power of two (padding disabled)")]
    NotPowerOfTwo { dim: usize, size: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank deficient: numerical rank {achieved} < requested {requested}")]
    RankDeficient { achieved: usize, requested: usize },

    #[error("non-finite value at index {0:?}")]
    NonFinite(Vec<usize>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad archive: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
