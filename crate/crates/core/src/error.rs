use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("ingestion error for {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },
    #[error("split error: class {class:?} has {available} images, {requested} requested (short by {})", requested - available)]
    Split {
        class: String,
        available: usize,
        requested: usize,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("training error at epoch {epoch}, step {step}: {msg}")]
    Training { epoch: usize, step: usize, msg: String },
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("scoring error for image {image}: {msg}")]
    Scoring { image: String, msg: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
