//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error: missing {what} at {path}")]
    Ingestion { what: String, path: PathBuf },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: class '{class}' has no train records")]
    EmptyClass { class: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable kind tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingestion { .. } => "ingestion",
            Error::Validation(_) => "validation",
            Error::Config(_) => "configuration",
            Error::EmptyClass { .. } => "sampling",
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Training { .. } => "training",
            Error::Evaluation(_) => "evaluation",
            Error::Search(_) => "search",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
