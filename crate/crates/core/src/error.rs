use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus: no sessions survive filtering")]
    EmptyCorpus,

    #[error("feature dimensionality mismatch: expected {expected}, found {found}{}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        found: usize,
        line: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown tag: {0}")]
    UnknownTag(String),

    #[error("unknown user: {0}")]
    UnknownUser(String),

    #[error("unknown session: {0}")]
    UnknownSession(usize),

    #[error("user {user} has a single session and cannot be split")]
    Unsplittable { user: String },

    #[error("no constraints for user {user}")]
    NoConstraints { user: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the input data rather than by the caller or
    /// the environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::EmptyCorpus
                | Error::DimensionMismatch { .. }
                | Error::Unsplittable { .. }
                | Error::MissingArtifact(_)
                | Error::Format { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::UnknownTag(_)
                | Error::UnknownUser(_)
                | Error::UnknownSession(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
