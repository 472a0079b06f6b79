use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: coordinates must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox([f64; 4]),

    #[error("cannot encode deltas against a proposal with zero width or height")]
    DegenerateProposal,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("cascade inference needs exactly 3 stages, got {0}")]
    StageCount(usize),

    #[error("detections reference unknown scene {0}")]
    UnknownScene(u64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}, line {line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than by data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownMode(_) | Error::StageCount(_)
        )
    }
}
