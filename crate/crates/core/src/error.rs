use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("empty recording")]
    EmptyRecording,

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("too many decomposition levels: {levels} requested for a signal of length {len}")]
    TooManyLevels { levels: usize, len: usize },

    #[error("inconsistent wavelet coefficients: {0}")]
    InconsistentCoefficients(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state {0} has fewer than the required labeled frames")]
    MissingStateCoverage(usize),

    #[error("feature column `{0}` is masked in every training row")]
    FullyMaskedFeature(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed network configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
}
