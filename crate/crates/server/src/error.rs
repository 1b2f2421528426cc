use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use deliberate_core::derive::DeriveError;
use deliberate_core::encode::EncodeError;
use deliberate_core::evaluate::EvalError;
use deliberate_core::explore::ExploreError;
use deliberate_core::ingest::IngestError;
use deliberate_core::schema::SchemaError;
use deliberate_core::session::SessionError;
use deliberate_core::trainer::TrainError;

/// The error half of the response envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

/// Every failure the service reports. `code` is the module error name.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn unauthorized() -> Self {
        ApiError::new("Unauthorized", "a valid bearer token is required")
    }

    pub fn forbidden(what: &str) -> Self {
        ApiError::new("Forbidden", format!("{what} is reserved for the facilitator"))
    }

    pub fn parse(message: impl Into<String>) -> Self {
        ApiError::new("ParseError", message)
    }

    pub fn not_found(kind: &str, id: &str) -> Self {
        ApiError::new(
            kind,
            format!("no such {}: `{id}`", kind.trim_start_matches("Unknown").to_lowercase()),
        )
    }

    pub fn storage(message: impl Into<String>) -> Self {
        ApiError::new("StorageFailure", message)
    }

    pub fn http_status(&self) -> u16 {
        match self.code.as_str() {
            "ParseError" => 400,
            "Unauthorized" => 401,
            "Forbidden" => 403,
            "NotFound" | "UnknownSession" | "UnknownModel" | "UnknownDataset" => 404,
            "IllegalTransition" | "StaleVersion" | "WrongState" | "SessionExists" | "DatasetExists"
            | "SessionNotReady" => 409,
            "StorageFailure" | "Internal" => 500,
            _ => 422,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.clone(),
            message: self.message.clone(),
            detail: self.detail.clone(),
        }
    }
}

impl From<ErrorBody> for ApiError {
    fn from(b: ErrorBody) -> Self {
        ApiError {
            code: b.code,
            message: b.message,
            detail: b.detail,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let detail = match &e {
            SessionError::StaleVersion { expected, actual } => Some(json!({"expected": expected, "actual": actual})),
            SessionError::IllegalTransition { state, event } => Some(json!({"state": state, "event": event})),
            SessionError::ParticipantsIncomplete(p) => Some(json!({"participants": p})),
            SessionError::MissingTiebreak(f) => Some(json!({"features": f})),
            _ => None,
        };
        ApiError {
            code: e.code().to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

macro_rules! plain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                ApiError::new(e.code(), e.to_string())
            }
        }
    )*};
}

plain_from!(
    TrainError,
    EvalError,
    ExploreError,
    IngestError,
    SchemaError,
    EncodeError,
    DeriveError
);

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::parse(e.to_string())
    }
}
