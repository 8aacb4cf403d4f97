use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown token id {id} (vocabulary size {size})")]
    Vocabulary { id: u32, size: usize },

    #[error("sequence of length {len} exceeds context length {max}")]
    Context { len: usize, max: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no transcript satisfies the tail predicate")]
    EmptyTailSet,

    #[error("WER is undefined for an empty reference")]
    UndefinedWer,

    #[error("transducer lattice has zero probability: {0}")]
    ZeroProbability(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}, batch ids {ids:?}")]
    Diverged { step: usize, ids: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
