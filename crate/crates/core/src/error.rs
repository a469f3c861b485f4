use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmsError {
    #[error("{path}:{line}: malformed fact line: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("time index {t} out of range (num_timestamps = {limit})")]
    TimeRange { t: u32, limit: usize },
    #[error("out-of-order absorption: snapshot {got} offered at frontier {expected}")]
    Ordering { got: u32, expected: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at timestamp {t} (epoch {epoch}): {detail}")]
    NonFiniteLoss { epoch: usize, t: u32, detail: String },
    #[error("i/o error at {path}: {source}")]
    IoAt {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LmsError>;
