use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    NodeShape { node: usize, op: &'static str, detail: String },

    #[error("non-finite gradient in parameter slot `{slot}`")]
    NonFiniteGradient { slot: String },

    #[error("non-finite loss in {phase} phase at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize, batch: usize },

    #[error("exponential moving average of e^T underflowed ({value:e}) at epoch {epoch}, batch {batch}")]
    EmaUnderflow { value: f64, epoch: usize, batch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("duplicate points at indices {first} and {second} give zero neighbor distance")]
    DuplicatePoints { first: usize, second: usize },

    #[error("non-finite correction value on calibration point {index}")]
    NonFiniteCalibration { index: usize },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wrap with a context string (phase, epoch, file, ...).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }
}
