use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op} on axis `{axis}`: {detail}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("training diverged at step {step} (epoch {epoch}): loss = {loss}")]
    Diverged {
        step: usize,
        epoch: usize,
        loss: f64,
    },

    #[error("missing class directory `{expected}` under {}", root.display())]
    MissingClassDir {
        root: PathBuf,
        expected: &'static str,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }
}
