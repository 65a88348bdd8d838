use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {left} is {left_shape:?}, {right} is {right_shape:?}")]
    ShapeMismatch {
        left: String,
        left_shape: (usize, usize),
        right: String,
        right_shape: (usize, usize),
    },

    #[error("non-finite value in {what} at path {path}, node {node}")]
    NonFinite { what: String, path: usize, node: usize },

    #[error("stochastic exponential overflowed at path {path}, node {node}; use the log-space variant")]
    Overflow { path: usize, node: usize },

    #[error(
        "mean truncation tail bound {mean:.4} exceeds trunc_eps {trunc_eps}; raise sim_horizon or enable resolve_tail"
    )]
    TruncationTooLoose { mean: f64, trunc_eps: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("consistency failure: {0}")]
    Consistency(String),

    #[error("long-only violation: strategy '{strategy}' takes position {position} at path {path}, node {node}")]
    LongOnlyViolation {
        strategy: String,
        position: f64,
        path: usize,
        node: usize,
    },
}

impl LabError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }
}
