use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file or directory could not be read or was missing.
    #[error("load error: {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A sample violated a data-model invariant.
    #[error("validation error in sample `{id}`: {reason}")]
    Validation { id: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("text provider error (retriable: {retriable}): {message}")]
    Provider { message: String, retriable: bool },

    /// A runtime contract (e.g. row-stochastic attention) did not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("empty evaluation: no pixels to score")]
    EmptyEvaluation,

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: loss = {loss}, gradient norm = {grad_norm}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn validation(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
