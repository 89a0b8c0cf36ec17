use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node} out of range for a graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("edge {0}->{1} conflicts with the opposite edge already present")]
    OppositeEdges(usize, usize),

    #[error("graph contains a cycle")]
    Cyclic,

    #[error("node count mismatch: {left} vs {right}")]
    NodeCountMismatch { left: usize, right: usize },

    #[error("encoding has length {got}, expected {expected}")]
    EncodingLength { got: usize, expected: usize },

    #[error("encoding value {0} is not one of 0, 0.5, 1")]
    EncodingValue(f64),

    #[error("exhaustive DAG enumeration supports at most {max} nodes, got {n}")]
    TooManyNodes { n: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("action index {index} is outside an action space of size {size}")]
    ActionOutOfRange { index: usize, size: usize },

    #[error("action {0} is not legal in this environment")]
    IllegalAction(usize),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("rejection sampling gave up after {0} attempts; is the held-out set covering every DAG?")]
    RejectionBudget(usize),

    #[error("not enough nonzero differences for the signed-rank test: {got} (need {need})")]
    TooFewPairs { got: usize, need: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
