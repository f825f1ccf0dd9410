use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FaError>;

/// Coarse error category, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum FaError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: String,
        found: String,
    },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("unknown view kind `{0}`")]
    UnknownViewKind(String),

    #[error("content hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("checksum mismatch for blob {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: String, supported: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at iteration {iteration}{}: {source}", view.as_ref().map(|v| format!(" (view `{v}`)")).unwrap_or_default())]
    Training {
        iteration: usize,
        view: Option<String>,
        #[source]
        source: Box<FaError>,
    },
}

impl FaError {
    pub fn dim(context: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        FaError::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        FaError::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        FaError::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        FaError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            FaError::Io { .. } => ErrorClass::Io,
            FaError::Numerical { .. } => ErrorClass::Numerical,
            FaError::Training { source, .. } => match source.class() {
                ErrorClass::Io => ErrorClass::Io,
                _ => ErrorClass::Numerical,
            },
            _ => ErrorClass::Validation,
        }
    }
}
