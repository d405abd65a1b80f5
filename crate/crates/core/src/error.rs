use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: missing schema line")]
    MissingSchema { path: PathBuf },

    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("record `{id}`: {field} has length {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        field: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("dataset record `{0}` has no text features")]
    MissingText(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("requested {requested} items but only {available} are available")]
    TooFew { requested: usize, available: usize },

    #[error("label `{0}` is unknown to the classifier")]
    UnknownLabel(String),

    #[error("classifier needs at least two distinct labels, found {0}")]
    SingleClass(usize),

    #[error("normal matrix is rank deficient (k = {k}); use a ridge lambda > 0")]
    RankDeficient { k: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
