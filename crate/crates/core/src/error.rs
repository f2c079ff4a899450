use std::path::PathBuf;

use thiserror::Error;

use crate::parser::{ResponseError, TagListError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("prompt template: {0}")]
    Template(String),

    #[error(transparent)]
    TagList(#[from] TagListError),

    #[error(transparent)]
    Response(#[from] ResponseError),

    #[error("embedding row {row} of {matrix} has zero norm; cosine similarity is undefined")]
    ZeroNorm { matrix: &'static str, row: usize },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("missing upstream artifact {}; run `{stage}` first", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("transport: {0}")]
    Transport(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short failure category, used for CLI diagnostics and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "stage-order",
            Error::Format { .. } | Error::Json(_) | Error::TagList(_) | Error::Response(_) => {
                "data"
            }
            Error::Transport(_) => "transport",
            Error::Template(_) => "template",
            Error::InvalidInput(_) | Error::Shape(_) | Error::ZeroNorm { .. } => "input",
            Error::NonFinite { .. } => "numeric",
        }
    }

    /// Process exit code for the category. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "stage-order" => 3,
            "data" => 4,
            "transport" => 5,
            "io" => 6,
            "numeric" => 7,
            _ => 1,
        }
    }
}
