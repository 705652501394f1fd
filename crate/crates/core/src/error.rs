use std::path::PathBuf;

use lara_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LaraError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset sample {index}: {detail}")]
    Sample { index: usize, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step} (batch sample indices {batch:?})")]
    NonFiniteLoss { step: u64, batch: Vec<usize> },
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LaraError {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| LaraError::File { path, source }
    }

    /// True for errors caused by the invocation rather than the run.
    pub fn is_usage(&self) -> bool {
        matches!(self, LaraError::Config(_) | LaraError::Argument(_))
    }
}

pub type Result<T> = std::result::Result<T, LaraError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LaraError::Argument(msg.into()))
}
