use std::path::PathBuf;

use dvc_core::dataset::DatasetError;
use dvc_core::eval::EvalError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention row {row} has no attendable key")]
    FullyMasked { row: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("every target position is padding")]
    AllPad,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {need} ground-truth events, got {got}")]
    TooFewEvents { need: usize, got: usize },
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("parameter `{0}` missing from loaded set")]
    MissingParam(String),
    #[error("model input does not match a {0} model")]
    WrongInput(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
