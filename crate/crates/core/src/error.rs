use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("out of range: {0}")]
    Range(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid tensor file: {0}")]
    Format(String),

    #[error("client transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("unparseable client response: {reason}")]
    ClientResponse { reason: String, raw: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }
}
