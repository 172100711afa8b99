use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("nothing to debug: no concepts marked spurious")]
    EmptyFeedback,

    #[error("invalid sample weights: {0}")]
    Weights(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty joint cell (y={y}, v={v}): weight undefined")]
    EmptyCell { y: usize, v: usize },

    #[error("empty exemplar pool for concept {0}")]
    EmptyExemplarPool(usize),

    #[error("strategy {strategy}: {reason}")]
    Strategy { strategy: String, reason: String },

    #[error("LLM request for concept {concept_id} failed: {message}")]
    LlmTransport { concept_id: usize, message: String },

    #[error("{path}: unsupported version tag {found:?}, expected {expected:?}")]
    Version {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that may succeed when repeated (network hiccups).
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::LlmTransport { .. })
    }

    /// Validation errors are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Dimension { .. }
                | Error::UnknownConcept(_)
                | Error::EmptyFeedback
                | Error::Weights(_)
                | Error::Strategy { .. }
        )
    }
}
