use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dropout rate {0} is outside [0, 1)")]
    InvalidRate(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged at step {step}: {detail}")]
    DivergenceDetected { step: u64, detail: String },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("SSIM window {window} does not fit a {height}x{width} image")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("eye {0}: inconsistent volume (ragged B-scan counts or disagreement with the manifest)")]
    InconsistentVolume(u32),
    #[error("split needs more eyes: {0}")]
    TooFewEyes(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_mismatch(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
