use std::path::PathBuf;

use thiserror::Error;

use crate::panel::Sex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing death count for group {group}, sex {sex}, year {year}, age {age}")]
    MissingCell {
        group: String,
        sex: Sex,
        year: i32,
        age: i32,
    },

    #[error("negative death count {value} on input line {line}")]
    NegativeCount { line: u64, value: f64 },

    #[error("duplicate row for group {group}, sex {sex}, year {year}, age {age} on input line {line}")]
    DuplicateCell {
        group: String,
        sex: Sex,
        year: i32,
        age: i32,
        line: u64,
    },

    #[error("years are not contiguous: {0}")]
    NonContiguousYears(String),

    #[error("ages are not contiguous: {0}")]
    NonContiguousAges(String),

    #[error("row for year {year} sums to zero and cannot be normalized")]
    ZeroRow { year: i32 },

    #[error("malformed input on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing column `{0}` in input header")]
    MissingColumn(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("incomplete panel: {0}")]
    IncompletePanel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("split impossible: {0}")]
    Split(String),

    #[error("empty residual bank for horizon {0}")]
    EmptyBank(usize),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
