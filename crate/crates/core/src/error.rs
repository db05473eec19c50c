use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?}")]
    BadShape { len: usize, shape: Vec<usize> },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("input dimension {got} does not match model input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a preceding train-mode forward pass")]
    NoForwardCache,

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("momentum correction undefined: previous learning rate is zero")]
    ZeroLastLr,

    #[error("worker count {k} exceeds dataset size {n}")]
    TooManyWorkers { k: usize, n: usize },

    #[error("halving/doubling requires a power-of-two server count, got p={0}; use binary blocks")]
    NotPowerOfTwo(usize),

    #[error("unknown allreduce algorithm `{0}` (expected ring, hd or blocks)")]
    UnknownAlgorithm(String),

    #[error("transport failure at step {step} with peer {peer}: {reason}")]
    Transport {
        step: usize,
        peer: usize,
        reason: String,
    },

    #[error("collective deadlocked with {pending} operations pending")]
    Deadlock { pending: usize },

    #[error("replica divergence detected at iteration {iter}")]
    ReplicaDivergence { iter: usize },

    #[error("non-finite training loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
