use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported element type {0:?}")]
    UnsupportedDtype(String),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("inconsistent sequence: {0}")]
    InconsistentSequence(String),
    #[error("frame index {missing} missing from a run of {count} frames")]
    FrameGap { missing: usize, count: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sequence has {len} frames, needs at least {target}")]
    TooShort { len: usize, target: usize },
    #[error("channel error: {0}")]
    Channel(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("window error: extent {len} does not fit a window of {window}")]
    Window { len: usize, window: usize },
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),
    #[error("degenerate range: all {0} scores are equal")]
    DegenerateRange(usize),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Whether this error aborted a training run (as opposed to rejecting input data).
    pub fn is_training_abort(&self) -> bool {
        match self {
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } | Error::State(_) => true,
            Error::Stage { source, .. } => source.is_training_abort(),
            _ => false,
        }
    }
}
