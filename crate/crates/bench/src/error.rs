use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, row {row}: {msg}")]
    Table {
        path: PathBuf,
        row: usize,
        msg: String,
    },
    #[error("{failed} of {total} runs failed, above the allowed fraction {allowed}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        allowed: f64,
    },
    #[error(transparent)]
    Core(#[from] caldrop_core::Error),
}

impl BenchError {
    /// Process exit code: 2 when the failure threshold is exceeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::TooManyFailures { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
