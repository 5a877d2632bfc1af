use thiserror::Error;

use crate::toy::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate sample `{id}`: {reason}")]
    DegenerateSample { id: String, reason: String },

    #[error("no valid records in corpus ({skipped} skipped)")]
    EmptyCorpus { skipped: usize },

    #[error("parse error: {0}")]
    Parse(String),

    /// Training produced a non-finite loss. Carries the last checkpoint whose
    /// parameters were all finite.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, last_good: Box<Checkpoint> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
