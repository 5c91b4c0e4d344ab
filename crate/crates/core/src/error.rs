//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while validating or loading datasets. Each variant names
/// the specific violation so callers can report it without re-deriving it.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset file missing: {0}")]
    MissingFile(PathBuf),
    #[error("manifest entry `{key}` is missing or unparseable")]
    BadManifest { key: String },
    #[error("{array}: expected {expected} values, file holds {actual}")]
    ShapeMismatch {
        array: String,
        expected: usize,
        actual: usize,
    },
    #[error("seen and unseen class sets overlap (class {0})")]
    ClassOverlap(i64),
    #[error("class {0} appears more than once in the attribute table")]
    DuplicateClass(i64),
    #[error("{split} row {row} has label {label}, which is outside the {side} class set")]
    SplitLabelViolation {
        split: String,
        row: usize,
        label: i64,
        side: String,
    },
    #[error("row index {index} appears in more than one split")]
    IndexOverlap { index: usize },
    #[error("row index {index} in {split} is out of range (dataset has {len} rows)")]
    IndexOutOfRange {
        index: i64,
        split: String,
        len: usize,
    },
    #[error("label {0} has no attribute row")]
    LabelWithoutAttribute(i64),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The rejection sampler exhausted its proposal budget.
    #[error("vMF sampler exceeded {cap} proposals at kappa = {kappa}")]
    SamplingFailure { kappa: f64, cap: usize },

    /// A class required by an operation has no data behind it.
    #[error("class {class_id} has no training samples")]
    MissingClass { class_id: i64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A metric was requested on inputs where it has no value.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// An external prediction file does not cover every required test row.
    #[error("prediction file is missing test indices {indices:?}")]
    MissingPredictions { indices: Vec<usize> },

    /// Training produced a non-finite loss; identifies where.
    #[error("non-finite loss in `{component}` at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("could not parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
