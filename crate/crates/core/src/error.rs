use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing prediction for sample id `{0}`")]
    MissingPrediction(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {component}")]
    Divergence {
        epoch: usize,
        batch: usize,
        component: String,
    },

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("unsupported evaluation: {0}")]
    UnsupportedEvaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable name used in the CLI's final status line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::MissingPrediction(_) | Error::Parse { .. } => "data",
            Error::Divergence { .. } => "divergence",
            Error::DegenerateState(_) => "degenerate",
            Error::UnsupportedEvaluation(_) => "unsupported-evaluation",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "data" => 3,
            "divergence" => 4,
            "unsupported-evaluation" => 5,
            "degenerate" => 6,
            _ => 1,
        }
    }
}
