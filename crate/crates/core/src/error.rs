use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
///
/// Variants are grouped so the CLI can map them onto exit codes: usage-type
/// problems (bad config, missing files) versus contract violations (shape
/// mismatches, non-finite values, broken invariants).
#[derive(Debug, Error)]
pub enum VifError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("precision mismatch in {0}: operands must share a precision")]
    Precision(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset format error at line {line}: {detail}")]
    Dataset { line: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VifError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        VifError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VifError::InvalidArgument(msg.into())
    }

    /// True for errors caused by how the program was invoked rather than by
    /// a broken numerical or structural contract.
    pub fn is_usage(&self) -> bool {
        matches!(self, VifError::Config(_) | VifError::Io(_) | VifError::InvalidArgument(_))
    }
}

pub type Result<T, E = VifError> = std::result::Result<T, E>;
