use std::path::PathBuf;

use mmt_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmtError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl MmtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmtError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmtError::Config(_) => 2,
            MmtError::Autodiff(AutodiffError::Config(_)) => 2,
            MmtError::Divergence(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmtError>;
