use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value at index {index} of {context}")]
    NonFiniteInput { context: &'static str, index: usize },

    #[error("numeric failure in {op}: {reason}")]
    NumericFailure { op: &'static str, reason: String },

    #[error("no class has both source and target samples in this batch")]
    NoOverlappingClass,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (class_loss = {class_loss}, adapt_loss = {adapt_loss})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        class_loss: f64,
        adapt_loss: f64,
    },

    #[error("training base learner {base} failed: {source}")]
    BaseTraining {
        base: String,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than by the caller's input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFailure { .. } | Error::NonFiniteLoss { .. } => true,
            Error::BaseTraining { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
