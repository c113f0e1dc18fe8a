use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid granularity: {0}")]
    InvalidGranularity(String),

    #[error("corpus train split has {available} bytes, need at least {needed}")]
    CorpusTooSmall { needed: usize, available: usize },

    #[error("sparsity pattern: {0}")]
    Pattern(String),

    #[error("matrix is not positive definite; raise the damping (λ) above {damping}")]
    NotPositiveDefinite { damping: f64 },

    #[error("normal matrix of row {row} is singular; use a ridge ε > 0")]
    SingularNormalMatrix { row: usize },

    #[error("missing activation tap: {0}")]
    MissingTap(String),

    #[error("non-finite loss in {context} (step {step}); parameters rolled back")]
    NonFiniteLoss { context: String, step: usize },

    #[error("holdout has {len} tokens, need at least one window of {seq_len}")]
    HoldoutTooShort { len: usize, seq_len: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
