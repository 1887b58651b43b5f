use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid layer sizes {sizes:?}: {reason}")]
    LayerSizes { sizes: Vec<usize>, reason: String },

    #[error("unknown system `{name}`; available: {}", available.join(", "))]
    UnknownSystem { name: String, available: Vec<&'static str> },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("estimator diverged at t = {t} (|dz| = {norm:.3e} > ceiling {ceiling:.3e}); refine dt or train further")]
    EstimatorDiverged { t: f64, norm: f64, ceiling: f64 },

    #[error("cycle {cycle}: {source}")]
    Cycle { cycle: usize, source: Box<Error> },

    #[error("insufficient snapshots: need at least {required}, have {available}")]
    InsufficientSnapshots { required: usize, available: usize },

    #[error("ragged snapshot records: record {index} has length {got}, expected {expected}")]
    RaggedSnapshots { index: usize, expected: usize, got: usize },
}
