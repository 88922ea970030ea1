use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label vector: {0}")]
    InvalidLabels(String),
    #[error("unsupported image size {0} (expected one of 32, 64, 128)")]
    UnsupportedSize(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("base parameters changed during adapter training (fingerprint {before:016x} -> {after:016x})")]
    BaseMutated { before: u64, after: u64 },
    #[error("malformed label file {path}: {detail}")]
    LabelFile { path: PathBuf, detail: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Param(#[from] autograd::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
