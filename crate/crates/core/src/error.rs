use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch at layer {layer}: expected {expected}, found {found}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        found: String,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("width mismatch: statistics side {expected}, capture width {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("layer {layer}: curvature factor {factor} is singular after damping (condition estimate {condition:.3e})")]
    Singular {
        layer: usize,
        factor: &'static str,
        condition: f64,
    },

    #[error("layer {layer}: inverse curvature diagonal {value:e} is not positive; increase damping")]
    NonPositiveCurvature { layer: usize, value: f64 },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("layer {layer} has no curvature statistics yet")]
    MissingStats { layer: usize },

    #[error("guard rail: {what} needs {count} parameters, limit is {limit}")]
    GuardRail {
        what: &'static str,
        count: usize,
        limit: usize,
    },

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("inconsistent channel topology: {0}")]
    Topology(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
