use alloc::string::String;

/// Errors produced by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid symbol {symbol:?} at position {position} in sequence {record:?}")]
    InvalidSymbol {
        record: String,
        symbol: char,
        position: usize,
    },
    #[error("empty sequence in record {0:?}")]
    EmptySequence(String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {record:?} has {found} features, dataset expects {expected}")]
    FeatureWidth {
        record: String,
        expected: usize,
        found: usize,
    },
    #[error("lab index {lab} out of range for {labs} labs")]
    LabOutOfRange { lab: usize, labs: usize },
    #[error("unknown lab {0:?}")]
    UnknownLab(String),
    #[error("duplicate lab name {0:?}")]
    DuplicateLab(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid token id {0}")]
    InvalidToken(u32),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("zero-norm row {row} in {what}")]
    ZeroNorm { what: &'static str, row: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::Diverged { .. }
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
