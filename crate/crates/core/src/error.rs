use thiserror::Error;

use crate::dataset::Fold;

/// Errors produced by the library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto configuration, data and numeric failure classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch at row {row}: expected {expected} values, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("label {label} at row {row} is outside [0, {class_count})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        class_count: usize,
    },

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("fold {0} has no classes")]
    EmptyFold(Fold),

    #[error("no validation sample belongs to expert {0}")]
    MissingExpert(String),

    #[error("class {0} has no samples to draw from")]
    EmptyClass(usize),

    #[error("sample keys differ between posterior tables: {0}")]
    KeyMismatch(String),

    #[error("non-finite loss {loss} at epoch {epoch}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite objective in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig(message.into())
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
