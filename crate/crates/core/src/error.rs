//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, pruning, training, and I/O.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("op {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("op {op} does not support second-order differentiation")]
    UnsupportedSecondOrder { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible pruning ratio {rho}: {reason}")]
    InfeasibleRatio { rho: f64, reason: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("structured pruning unsupported: {0}")]
    StructuredUnsupported(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checkpoint format version {found} unsupported (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
