use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("scene not found in feature file: {0}")]
    Lookup(String),

    #[error("cannot split class `{class}`: it has {count} scene(s), at least 2 required")]
    Split { class: String, count: usize },

    #[error("cannot sample: class {0} has no scenes")]
    Sampling(usize),

    #[error("training diverged at step {step}: non-finite loss, gradient or parameter")]
    Divergence { step: usize },

    #[error("run matrix is incomplete; missing cells: {}", .missing.join(", "))]
    Incomplete { missing: Vec<String> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
