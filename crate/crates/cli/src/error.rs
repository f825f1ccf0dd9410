use std::fmt;
use std::path::Path;

use favae::{ErrorClass, FaError};

/// Process exit codes.
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<FaError> for CliError {
    fn from(e: FaError) -> Self {
        let msg = e.to_string();
        match e.class() {
            ErrorClass::Validation => CliError::Validation(msg),
            ErrorClass::Io => CliError::Io(msg),
            ErrorClass::Numerical => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
