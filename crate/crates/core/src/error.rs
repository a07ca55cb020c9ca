use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("tumor is not contained in the lung at phase {phase}")]
    TumorOutsideLung { phase: usize },
    #[error("requested {requested} components but the centered data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite loss at epoch {epoch}, sample `{sample}`")]
    NonFiniteLoss { epoch: usize, sample: String },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("sample source: {0}")]
    Source(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
