use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("attention mask row {row} selects no key")]
    DegenerateMask { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset gradients first")]
    AlreadyBackpropagated,
    #[error("loss does not depend on any tensor that requires a gradient")]
    Detached,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown token {0:?}")]
    Vocabulary(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("empty accumulator")]
    EmptyAccumulator,
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
