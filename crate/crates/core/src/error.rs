use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix dimension {rows}x{cols} exceeds the supported bound of {bound}")]
    DimensionTooLarge { rows: usize, cols: usize, bound: usize },

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NonConvergence { iterations: usize, estimate: f64 },

    #[error("stable rank is undefined for the zero matrix")]
    ZeroMatrix,

    #[error("correlation input is constant")]
    ConstantInput,

    #[error("sequence lengths differ or are too short ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("adapter rank {rank} exceeds min({d}, {k})")]
    RankTooLarge { d: usize, k: usize, rank: usize },

    #[error("stochastic partial updating is disabled for this adapter")]
    SpuDisabled,

    #[error("missing weight for {0}")]
    MissingWeight(String),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("rank plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("tensor '{tensor}' overlaps a preceding tensor or is out of order (offset {offset})")]
    OffsetOverlap { tensor: String, offset: u64 },

    #[error("tensor '{tensor}' extends past the payload end ({end} > {payload_len})")]
    TruncatedPayload { tensor: String, end: u64, payload_len: u64 },

    #[error("tensor '{tensor}' has unknown dtype '{dtype}'")]
    UnknownDtype { tensor: String, dtype: String },

    #[error("duplicate tensor key for '{0}'")]
    DuplicateKey(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
