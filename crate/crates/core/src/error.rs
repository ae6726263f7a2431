use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: data offsets [{begin}, {end}) exceed payload of {len} bytes")]
    OffsetOutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: u64,
    },

    #[error("tensors `{first}` and `{second}` have overlapping data offsets")]
    OverlappingOffsets { first: String, second: String },

    #[error("data offsets do not tile the payload: {0}")]
    OffsetGap(String),

    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("cannot write an empty tensor map")]
    EmptyMap,

    #[error("tensor `{name}` is missing from one of the checkpoints")]
    MissingTensor { name: String },

    #[error("tensor `{name}` shape mismatch: {expected:?} vs {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("base fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("masks are not disjoint: tensor `{name}` flat index {index} is claimed {count} times")]
    DisjointnessViolation { name: String, index: usize, count: usize },

    #[error("merging ratios sum to {sum}, which exceeds 1")]
    RatioSum { sum: f64 },

    #[error("method `{method}` is unavailable: {reason}")]
    UnavailableMethod { method: String, reason: String },

    #[error("missing calibration: {0}")]
    MissingCalibration(String),

    #[error("no Hessian diagonal for linear weight `{0}`")]
    MissingHessian(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite activation in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("normal matrix is rank deficient; use a positive ridge")]
    RankDeficient,

    #[error("training diverged: loss increased for {epochs} consecutive epochs (epoch {epoch})")]
    Diverged { epoch: usize, epochs: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
