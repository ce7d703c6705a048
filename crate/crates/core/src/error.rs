use std::io;

/// Errors produced by the decoding engine and its model backends.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("context overflow: position {position} exceeds max context {max_context}")]
    ContextOverflow { position: usize, max_context: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid commit: {0}")]
    InvalidCommit(String),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("enumeration too large: {0}")]
    TooLarge(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
