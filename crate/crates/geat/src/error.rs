use std::path::{Path, PathBuf};

/// Failures of the std layer, classified by CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum GeatError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] geat_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = GeatError> = std::result::Result<T, E>;

impl GeatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        GeatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        GeatError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// 1 usage, 2 data or validation, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GeatError::Usage(_) => 1,
            GeatError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}
