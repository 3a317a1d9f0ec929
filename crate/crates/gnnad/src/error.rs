use std::path::{Path, PathBuf};

use gnnad_core::Error as CoreError;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numerical(CoreError),
    #[error(transparent)]
    Core(CoreError),
}

impl AppError {
    /// Process exit code: 1 configuration, 2 I/O and file format,
    /// 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Core(_) => 1,
            AppError::Io { .. } | AppError::Format { .. } => 2,
            AppError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NotPositiveDefinite { .. }
            | CoreError::NonFinite(_)
            | CoreError::Diverged { .. }
            | CoreError::ZeroNormEmbedding(_) => AppError::Numerical(e),
            other => AppError::Core(other),
        }
    }
}
