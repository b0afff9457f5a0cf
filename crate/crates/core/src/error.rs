use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("every key position is masked")]
    AllMasked,

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),

    #[error("report contains no non-empty segment")]
    EmptyReport,

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("slide {slide}: mixture collapsed on degenerate input after {attempts} re-seeding attempts")]
    DegenerateInput { slide: String, attempts: usize },

    #[error("pathway {0} has no gene present in the gene order")]
    EmptyPathway(String),

    #[error("no modality is enabled")]
    NoModalitiesEnabled,

    #[error("cohort contains no observed event")]
    NoEvents,

    #[error("no comparable pair of survival records")]
    NoComparablePairs,

    #[error("attention block for {0} is empty")]
    BlockEmpty(&'static str),

    #[error("{path}: bad magic or header")]
    BadMagic { path: PathBuf },

    #[error("{path}: declared shape {rows}x{cols} does not match payload")]
    ShapeOverflow { path: PathBuf, rows: u64, cols: u64 },

    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFiniteValue { path: PathBuf, row: usize, col: usize },

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },

    #[error("duplicate gene set name {0}")]
    DuplicateSetName(String),

    #[error("patient {0}: negative survival time")]
    NegativeTime(String),

    #[error("patient {patient}: event flag must be 0 or 1, got {value}")]
    BadEventFlag { patient: String, value: String },

    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),

    #[error("cannot split {n} patients into {k} folds")]
    TooFewPatients { n: usize, k: usize },

    #[error("checkpoint fingerprint mismatch for {what}")]
    FingerprintMismatch { what: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
