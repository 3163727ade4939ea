use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NmaError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: [usize; 2], len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("allocation count for N={n}, K={k} exceeds the cap of {cap}")]
    TooManyAllocations { n: usize, k: usize, cap: usize },

    #[error("invalid auction config: {0}")]
    InvalidConfig(String),

    #[error("invalid instance {id}: {reason}")]
    InvalidInstance { id: u64, reason: String },

    #[error("payments undefined: N={n} ads cannot fill K={k} slots once a winner is removed")]
    PaymentUndefined { n: usize, k: usize },

    #[error("bid-derived input `{0}` is not allowed in the per-ad multiplier network")]
    BidDerivedInput(String),

    #[error("click-model sidecar is required for evaluation")]
    MissingOracle,

    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = NmaError> = std::result::Result<T, E>;
