use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: non-finite value at pixel {0}")]
    InvalidLogits(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {what} ({left} vs {right})")]
    ShapeMismatch {
        what: &'static str,
        left: String,
        right: String,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("k must be even, got {0}")]
    OddK(usize),
    #[error("empty index list")]
    EmptyIndices,
    #[error("stain matrix is singular")]
    SingularMatrix,
    #[error("input size {width}x{height} must be divisible by {factor}")]
    BadSpatialSize {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("backward called without a cached forward pass")]
    BackwardWithoutForward,
    #[error("diverged: non-finite gradient in parameter {0}")]
    DivergedGradient(String),
    #[error("diverged: non-finite loss at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("no-signal: all paired differences are zero")]
    NoSignal,
    #[error("need at least {need} non-zero paired differences, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("impossible geometry: {0}")]
    ImpossibleGeometry(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(what: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
