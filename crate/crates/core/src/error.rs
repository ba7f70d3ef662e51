use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("sequence of {len} positions exceeds the limit of {limit}")]
    Overlength { len: usize, limit: usize },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("words missing from the vocabulary: {0:?}")]
    VocabularyMiss(Vec<String>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("class sets overlap: {0:?}")]
    ClassOverlap(Vec<String>),
    #[error("class sets differ: {0}")]
    ClassMismatch(String),
    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerics rather than usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Domain { .. })
    }
}
