use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} out of range for a {ndim}-mode tensor")]
    ModeOutOfRange { mode: usize, ndim: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("rank {rank} out of range (allowed 1..={max})")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("rank increase not allowed: {0}")]
    RankIncrease(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("infeasible rank: {0}")]
    InfeasibleRank(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown group for layer `{0}`")]
    UnknownGroup(String),

    #[error("layer `{0}` already belongs to a decomposed group")]
    AlreadyDecomposed(String),

    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        history: Box<crate::trainer::TrainHistory>,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
