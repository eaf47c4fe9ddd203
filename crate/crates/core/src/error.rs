use thiserror::Error;

/// Failure talking to a generation, retrieval or value backend.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned an invalid response: {0}")]
    InvalidResponse(String),
}
