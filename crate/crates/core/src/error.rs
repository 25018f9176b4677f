use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("feature sequence is empty")]
    EmptyFeatures,
    #[error("invalid word spans: {0}")]
    InvalidSpans(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{mode} attention needs segmentation info")]
    MissingSegInfo { mode: &'static str },
    #[error("loss term {term} is not finite")]
    NonFiniteLoss { term: &'static str },
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x the initial {initial}; log: {log}")]
    Divergence { epoch: usize, loss: f64, initial: f64, log: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("replay mismatch at event {event}: {message}")]
    Replay { event: usize, message: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
