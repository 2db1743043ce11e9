use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor, matrix or mask dimensions that do not fit together.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation argument outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed configuration, weights or dataset; `field` names the offending entry.
    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed input documents rather than violated contracts.
    pub fn is_schema(&self) -> bool {
        matches!(self, Error::Schema { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
