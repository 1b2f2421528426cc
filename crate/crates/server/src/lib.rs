//! HTTP service for deliberation sessions: JSON envelopes over axum, bearer
//! token roles, background training and durable event-log storage.

pub mod envelope;
pub mod error;
pub mod http;
pub mod query;
pub mod service;
pub mod store;

pub use envelope::{payload_json, ApiEnvelope};
pub use error::{ApiError, ErrorBody};
pub use http::{prepare, router, serve, ServeConfig, ServeError};
pub use service::{Auth, Service, ServiceConfig};
