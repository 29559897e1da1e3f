use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("sample {index}: {reason}")]
    Generation { index: usize, reason: String },

    #[error("non-finite value in `{term}` at t = {time}")]
    NonFinite { term: &'static str, time: f64 },

    #[error("dataset has no stored latents; counterfactuals cannot be regenerated")]
    MissingLatents,

    #[error("sample {0} is not in the test split")]
    NotInTestSplit(usize),

    #[error("{what} at byte offset {offset}: {reason}")]
    Parse {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("support of size {size} exceeds the limit of {limit} atoms")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("no donors with treatment near {t_prime}")]
    NoDonors { t_prime: f64 },

    #[error("ambiguous component matching at grid index {index}")]
    AmbiguousAlignment { index: usize },

    #[error("covariance entry {value} below floor {floor}")]
    SingularCovariance { value: f64, floor: f64 },

    #[error("checksum mismatch: manifest says {expected}, data hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
