use std::path::{Path, PathBuf};

use dvc_core::codebook::CodebookError;
use dvc_core::cooccur::CooccurError;
use dvc_core::dataset::DatasetError;
use dvc_core::eval::EvalError;
use dvc_core::semvec::SemvecError;
use dvc_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Cooccur(#[from] CooccurError),
    #[error(transparent)]
    Semvec(#[from] SemvecError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}
