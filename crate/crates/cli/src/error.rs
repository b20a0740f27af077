use migc_bench::BenchError;
use migc_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Tensor(#[from] migc_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::Numerical { .. }) => EXIT_NUMERICAL,
            CliError::Bench(BenchError::Core(CoreError::Numerical { .. })) => EXIT_NUMERICAL,
            CliError::Bench(BenchError::OracleClosure(_)) => EXIT_ORACLE,
            _ => EXIT_USAGE,
        }
    }
}
