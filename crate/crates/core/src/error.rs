use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward: output must be a single-element tensor, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward: node {0} does not belong to this graph")]
    ForeignNode(usize),

    #[error("backward: input node {0} is not part of the output's history")]
    Unreachable(usize),

    #[error(
        "backward: node {0} is only connected through a detached gradient; \
         recompute the inner gradient with higher-order mode enabled"
    )]
    HigherOrderRequired(usize),

    #[error("{0}: ReLU networks have an identically zero input Hessian; use a Softplus activation")]
    ZeroSecondDerivative(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
