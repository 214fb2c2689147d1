use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sample position ({x}, {y})")]
    InvalidPosition { x: f64, y: f64 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeError { op: &'static str, detail: String },

    #[error("loss must be a scalar, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("non-finite value produced by `{primitive}`")]
    NumericalFailure { primitive: String },

    #[error("pressure solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    PoissonDivergence { iterations: usize, residual: f64 },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("baseline error is zero, improvement is undefined")]
    DegenerateBaseline,

    #[error("format error at byte {offset}: {message}")]
    FormatError { offset: u64, message: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("solver failed at step {step}: {source}")]
    SimulationFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeError { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
