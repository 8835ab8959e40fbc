use std::path::PathBuf;

use thiserror::Error;

use crate::Round;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("length mismatch: {updates} updates but {weights} weights")]
    WeightCount { updates: usize, weights: usize },

    #[error("updates are not contiguous: span ending at {prev_end} followed by span starting at {next_start}")]
    NonContiguous { prev_end: Round, next_start: Round },

    #[error("cannot accumulate incompatible updates: {0}")]
    Incompatible(String),

    #[error("round {round} is outside the retained window [{oldest}, {newest}]")]
    Evicted { round: Round, oldest: Round, newest: Round },

    #[error("invalid range: t1={t1}, t2={t2}")]
    InvalidRange { t1: Round, t2: Round },

    #[error("non-positive duration {0}")]
    Duration(f64),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("{path}: row {row}: {reason}")]
    Trace { path: PathBuf, row: usize, reason: String },

    #[error("io error on {path}: {source}")]
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
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
