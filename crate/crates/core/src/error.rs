use migc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid box {0:?}: {1}")]
    InvalidBox([f64; 4], &'static str),
    #[error("resolution mismatch: expected {expected:?}, got {got:?}")]
    Resolution { expected: (usize, usize), got: (usize, usize) },
    #[error("{n} instances exceed the SAC channel budget max_num = {max_num}; raise model.max_num")]
    TooManyInstances { n: usize, max_num: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
