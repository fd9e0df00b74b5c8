use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("backend returned HTTP {status}: {body}")]
    Backend { status: u16, body: String },

    #[error("unscripted prompt: {head:?}")]
    Unscripted { head: String },

    #[error("could not parse model reply: {0}")]
    Parse(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("computation error ({tag}): {message}")]
    Computation { tag: &'static str, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport-level failures are the only ones worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Transport { .. } => true,
            Error::Backend { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Failures of the backend itself, as opposed to unusable replies.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            Error::Transport { .. } | Error::Backend { .. } | Error::Unscripted { .. }
        )
    }
}
