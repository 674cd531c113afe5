use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("process `{process}`, entity `{entity}`: {message}")]
    InvalidProcess {
        process: String,
        entity: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input of length {len} exceeds the limit of {max} positions")]
    TooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unsupported objective: {0}")]
    UnsupportedObjective(String),

    #[error("forward trace was computed without a gradient cache")]
    MissingCache,

    #[error("gold sequence is infeasible under the transition mask: {0}")]
    InfeasibleGold(String),

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite parameters in `{0}`")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input rather than an internal failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidProcess { .. }
                | Error::Validation(_)
                | Error::TooLong { .. }
                | Error::TokenOutOfRange { .. }
                | Error::UnsupportedObjective(_)
                | Error::InfeasibleGold(_)
                | Error::Incompatible(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
