use needcraft_core::orchestrator::{Phase, SessionError};
use thiserror::Error;

use crate::store::{RecoverError, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no session with id {0}")]
    UnknownSession(String),
    #[error("the query is empty")]
    EmptyQuery,
    #[error("the message is empty")]
    EmptyMessage,
    #[error("the session does not accept this during {0}")]
    WrongPhase(Phase),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("session {id} could not be recovered: {source}")]
    Recover {
        id: String,
        #[source]
        source: RecoverError,
    },
    #[error("the session is shutting down")]
    ShuttingDown,
}

impl ServiceError {
    /// Machine-readable code, equal to the error name.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "UnknownSession",
            ServiceError::EmptyQuery => "EmptyQuery",
            ServiceError::EmptyMessage => "EmptyMessage",
            ServiceError::WrongPhase(_) => "WrongPhase",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Session(e) => e.code(),
            ServiceError::Store(_) => "StorageError",
            ServiceError::Recover { .. } => "RecoveryError",
            ServiceError::ShuttingDown => "ShuttingDown",
        }
    }

    pub fn status(&self) -> u16 {
        match self.code() {
            "UnknownSession" | "UnknownNeedId" => 404,
            "EmptyQuery" | "EmptyMessage" | "BadRequest" | "EmptyNeed" | "InvalidCombination" | "InvalidWant" => 400,
            "WrongPhase" | "WrongMode" | "DuplicateNeed" | "AlreadyClarified" | "ReopenNotSupported"
            | "WriteOutsideDrafting" => 409,
            "ShuttingDown" => 503,
            "BackendError" | "FixtureMiss" | "DigestMismatch" | "PolicyViolation" | "ProtocolTimeout"
            | "DuplicateMilestone" | "InvalidOutput" => 502,
            _ => 500,
        }
    }
}
