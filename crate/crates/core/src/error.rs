use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("channel mismatch for {source_name}: declared {declared}, features carry {actual}")]
    ChannelMismatch {
        source_name: String,
        declared: usize,
        actual: usize,
    },

    #[error("requested {requested} samples from {available} points")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("proposal {index}: {source}")]
    Proposal {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
