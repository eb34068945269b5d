use std::path::{Path, PathBuf};

use factcheck_core::dataset::DatasetError;
use factcheck_core::stats::StatsError;

use crate::lm_client::LmError;
use crate::scorer::ScorerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("statistics: {0}")]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("run directory: {0}")]
    Store(String),
    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn parse(path: impl AsRef<Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.as_ref().to_path_buf(), line, message: message.into() }
    }
}
