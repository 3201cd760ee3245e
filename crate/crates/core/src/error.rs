use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmfError>;

#[derive(Debug, Error)]
pub enum PmfError {
    /// Shape mismatch inside a numeric operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {detail}", file.display())]
    Validation {
        file: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("format error in {}: {detail}", file.display())]
    Format { file: PathBuf, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PmfError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        PmfError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PmfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line runner. Configuration, data and
    /// numeric failures are kept distinct.
    pub fn exit_code(&self) -> i32 {
        match self {
            PmfError::Config(_) => 2,
            PmfError::MissingFile(_)
            | PmfError::Validation { .. }
            | PmfError::Format { .. }
            | PmfError::Data(_) => 3,
            PmfError::Numeric(_) | PmfError::Dimension { .. } => 4,
            PmfError::Io { .. } => 5,
        }
    }
}
