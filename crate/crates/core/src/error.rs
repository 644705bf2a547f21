use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no available expert for this record")]
    NoAvailableExpert,

    #[error("available mixture weights sum to {0:e}, below 1e-12")]
    DegenerateWeights(f64),

    #[error("record `{0}` has no available expert and cannot be encoded")]
    Unencodable(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("non-finite loss {loss} at step {step} (batch ids: {batch:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        batch: Vec<String>,
    },

    #[error("similarity for pair (video {video}, text {text}): {source}")]
    Pair {
        video: usize,
        text: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
