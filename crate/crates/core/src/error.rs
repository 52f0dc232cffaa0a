use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedCalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedCalError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("training diverged (non-finite loss) at round {round}, client {client}, epoch {epoch}")]
    Divergence {
        round: usize,
        client: usize,
        epoch: usize,
    },

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("IDX format error in {path}: {message}")]
    IdxFormat { path: PathBuf, message: String },

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),

    #[error("output directory {0} already contains results (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FedCalError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FedCalError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedCalError::Io {
            path: path.into(),
            source,
        }
    }
}
