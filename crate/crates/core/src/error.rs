use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("division by exact zero with gradients required")]
    DivisionByZero,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape without re-recording")]
    TapeConsumed,
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
