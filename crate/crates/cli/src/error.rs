use std::fmt;

use harmonize_core::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_DATA: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISSING_INPUT, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self::new(EXIT_FAILURE, message)
    }

    /// Errors raised while reading a checkpoint.
    pub fn from_checkpoint(e: Error) -> Self {
        match e {
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::missing(e.to_string())
            }
            e => Self::new(EXIT_CHECKPOINT, format!("incompatible checkpoint: {e}")),
        }
    }

    /// Errors raised while reading or using a dataset.
    pub fn from_data(e: Error) -> Self {
        match e {
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::missing(e.to_string())
            }
            Error::Diverged { .. } => Self::failure(e.to_string()),
            Error::Io { .. } => Self::failure(e.to_string()),
            e => Self::data(e.to_string()),
        }
    }

    /// Errors while writing outputs.
    pub fn from_output(e: Error) -> Self {
        Self::failure(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
