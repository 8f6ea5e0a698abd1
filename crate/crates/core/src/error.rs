use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("session {session_id}: invalid {field}: {message}")]
    Validation {
        session_id: String,
        field: String,
        message: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("session {session_id} has {frames} frames; at least {minimum} are required ({reason})")]
    TooShort {
        session_id: String,
        frames: usize,
        minimum: usize,
        reason: &'static str,
    },

    #[error("{statistic}: {message}")]
    Statistic {
        statistic: String,
        message: String,
    },

    #[error("model container: {0}")]
    Container(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the user's data or configuration rather than
    /// by a defect in this crate.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Dataset(_)
                | Error::Config(_)
                | Error::TooShort { .. }
                | Error::Statistic { .. }
                | Error::Container(_)
                | Error::Layout(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
