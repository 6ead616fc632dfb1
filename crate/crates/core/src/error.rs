use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training error in {context}: {message}")]
    Training { context: String, message: String },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            context,
            left,
            right,
        }
    }

    pub(crate) fn training(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Training {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the context of a training error, leaving other kinds untouched.
    pub fn within(self, scope: impl std::fmt::Display) -> Self {
        match self {
            Error::Training { context, message } => Error::Training {
                context: format!("{scope}: {context}"),
                message,
            },
            other => other,
        }
    }

    /// Short machine-readable kind used in structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::Training { .. } => "training",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Lookup(_) => "lookup",
            Error::Aggregation(_) => "aggregation",
            Error::Evaluation(_) => "evaluation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::Lookup(_)
            | Error::Io { .. }
            | Error::Checkpoint(_) => 3,
            Error::Dimension { .. }
            | Error::Domain(_)
            | Error::Training { .. }
            | Error::Aggregation(_)
            | Error::Evaluation(_) => 4,
        }
    }
}
