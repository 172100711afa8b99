use thiserror::Error;

/// Service-level failure, sorted by who is at fault.
#[derive(Debug, Error)]
pub enum ServiceError {
    /// Bad request or precondition: HTTP 422, exit code 1.
    #[error("{message}")]
    Validation {
        message: String,
        /// Offending concept id, when that is the problem.
        concept_id: Option<usize>,
    },
    #[error("not found: {0}")]
    NotFound(String),
    /// A job is already running on the run, or the status forbids the request.
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] cbdebug_core::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn validation(message: impl Into<String>) -> Self {
        ServiceError::Validation {
            message: message.into(),
            concept_id: None,
        }
    }

    pub fn is_validation(&self) -> bool {
        match self {
            ServiceError::Validation { .. } | ServiceError::NotFound(_) | ServiceError::Conflict(_) => true,
            ServiceError::Core(e) => e.is_validation(),
            ServiceError::Runtime(_) => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}
