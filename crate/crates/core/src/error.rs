use std::path::PathBuf;

use meshcontact_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("mesh construction failed: {0}")]
    Construction(String),

    #[error("{what}: truncated or malformed data at byte offset {offset}")]
    Parse { what: String, offset: usize },

    #[error("load error: {0}")]
    Load(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("Procrustes alignment failed: {0}")]
    Alignment(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigParse { .. } => 2,
            Error::Tensor(TensorError::Config(_)) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
