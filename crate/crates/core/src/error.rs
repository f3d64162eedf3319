use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("augmented views do not overlap by at least the minimum side")]
    NoOverlap,
    #[error("region {w:.2}x{h:.2} is smaller than the minimum box side {min_side}")]
    DegenerateRegion { w: f64, h: f64, min_side: f64 },
    #[error("structural mismatch: {0}")]
    Structure(String),
    #[error("shape error: {0}")]
    Shape(#[from] di3cl_tensor::Error),
    #[error("batch of {batch} exceeds memory bank capacity {capacity}")]
    Capacity { batch: usize, capacity: usize },
    #[error("{0} is empty; warm it up before computing losses")]
    NotReady(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {msg}")]
    Codec { path: PathBuf, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metrics are undefined for an all-zero confusion matrix")]
    UndefinedMetrics,
    #[error("incomplete tile plan: {0}")]
    IncompletePlan(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
