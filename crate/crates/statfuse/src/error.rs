use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the fusion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("row {row}, column '{column}': {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("serialization error: {0}")]
    Serialize(String),

    #[error("fusion output incomplete; partial marker written to {0}")]
    PartialOutput(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
