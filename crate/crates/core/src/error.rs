use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NiceError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("non-finite loss at epoch {epoch} step {step} (lr {lr:e}, grad norms: {grad_norms})")]
    NonFinite {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norms: String,
    },

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NiceError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NiceError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        NiceError::Format {
            kind,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
