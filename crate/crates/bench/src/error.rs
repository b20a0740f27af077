use migc_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("could not place {level} boxes after {retries} attempts; relax min_side/max_side or lower the level")]
    Infeasible { level: usize, retries: usize },
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("no evaluation records")]
    Empty,
    #[error("oracle closure failed: {0}")]
    OracleClosure(String),
    #[error("image: {0}")]
    Image(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
