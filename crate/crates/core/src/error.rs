use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no masked positions")]
    NoMaskedPositions,

    #[error("infeasible alignment: {labels} labels need at least {needed} frames, got {frames}")]
    InfeasibleAlignment {
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("enumeration guard exceeded: {0} paths")]
    GuardExceeded(u128),

    #[error("labels are unreachable (probability 0)")]
    Unreachable,

    #[error("input too short: {got} frames, feature encoder needs at least {min}")]
    InputTooShort { got: usize, min: usize },

    #[error("parameter sets differ: only in left {only_left:?}, only in right {only_right:?}")]
    ParameterMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },

    #[error("missing transcript for utterance {0}")]
    MissingTranscript(String),

    #[error("vocabulary mismatch: head emits {head} classes, vocabulary needs {vocab}")]
    VocabularyMismatch { head: usize, vocab: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
