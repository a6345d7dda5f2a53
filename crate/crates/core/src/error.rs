//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// API misuse, e.g. a second backward pass over one graph.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{what} index {index} out of range (len {len})")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("length error: {0}")]
    Length(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("numerical abort at epoch {epoch}, batch {batch}: task loss {task_loss}, density loss {density_loss}")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        task_loss: f64,
        density_loss: f64,
    },

    #[error("version error: {0}")]
    Version(String),

    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
