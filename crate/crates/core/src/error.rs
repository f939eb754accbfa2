use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, training or dataset configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed a value outside an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// An image file could not be read or decoded.
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("missing image files: {0:?}")]
    MissingFiles(Vec<PathBuf>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("triplet error: {0}")]
    Triplet(String),

    #[error("non-finite activation in {stage} at layer {layer}")]
    NumericFault { stage: String, layer: usize },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("manifest parse error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingest(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 1,
            Error::NumericFault { .. } | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
