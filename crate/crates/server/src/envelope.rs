use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ApiError, ErrorBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

/// The shape of every JSON response: `{"status":"ok","payload":...}` or
/// `{"status":"error","error":{"code":...,"message":...,"detail":...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEnvelope {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl ApiEnvelope {
    pub fn ok(payload: Value) -> Self {
        ApiEnvelope {
            status: Status::Ok,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn error(e: &ApiError) -> Self {
        ApiEnvelope {
            status: Status::Error,
            payload: None,
            error: Some(e.body()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelopes always serialize")
    }
}

/// Compact JSON for a payload; the exact bytes that appear after
/// `"payload":` in an ok envelope.
pub fn payload_json(payload: &Value) -> String {
    serde_json::to_string(payload).expect("values always serialize")
}
