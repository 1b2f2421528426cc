use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

use deliberate_core::session::SessionSettings;

use crate::envelope::ApiEnvelope;
use crate::error::ApiError;
use crate::query::PersonaParams;
use crate::service::{Auth, IngestInput, Service, ServiceConfig};
use crate::store::DEFAULT_SNAPSHOT_EVERY;

type Shared = Arc<Service>;

fn respond(result: Result<Value, ApiError>) -> Response {
    let (status, envelope) = match result {
        Ok(payload) => (StatusCode::OK, ApiEnvelope::ok(payload)),
        Err(e) => (
            StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            ApiEnvelope::error(&e),
        ),
    };
    (status, [(header::CONTENT_TYPE, "application/json")], envelope.to_json()).into_response()
}

fn auth(headers: &HeaderMap) -> Auth {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty());
    Auth::Bearer(token)
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::parse(format!("request body: {e}")))
}

fn query(raw: &Option<String>) -> Result<BTreeMap<String, String>, ApiError> {
    let mut out = BTreeMap::new();
    for pair in raw.as_deref().unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        out.insert(decode(k)?, decode(v)?);
    }
    Ok(out)
}

/// Percent-decoding for query components, with `+` as space.
fn decode(text: &str) -> Result<String, ApiError> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' => {
                let hex = text
                    .get(i + 1..i + 3)
                    .and_then(|h| u8::from_str_radix(h, 16).ok())
                    .ok_or_else(|| ApiError::parse(format!("bad percent escape in `{text}`")))?;
                out.push(hex);
                i += 2;
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8(out).map_err(|_| ApiError::parse("query is not valid UTF-8"))
}

async fn health(State(s): State<Shared>) -> Response {
    respond(Ok(s.health()))
}

async fn create_session(State(s): State<Shared>, headers: HeaderMap, bytes: Bytes) -> Response {
    respond(body(&bytes).and_then(|req| s.create_session(&auth(&headers), req)))
}

async fn list_sessions(State(s): State<Shared>, headers: HeaderMap) -> Response {
    respond(s.sessions(&auth(&headers)))
}

async fn get_session(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.session(&auth(&headers), &id))
}

async fn advance(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>, bytes: Bytes) -> Response {
    respond(body(&bytes).and_then(|req| s.advance(&auth(&headers), &id, req)))
}

async fn explore_feature(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path((id, feature)): Path<(String, String)>,
    RawQuery(raw): RawQuery,
) -> Response {
    let result = query(&raw).and_then(|q| {
        let bins = q
            .get("bins")
            .map(|b| {
                b.parse::<usize>()
                    .map_err(|_| ApiError::parse(format!("bins `{b}` is not a number")))
            })
            .transpose()?;
        s.explore_feature(&auth(&headers), &id, &feature, bins)
    });
    respond(result)
}

async fn explore_pair(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Response {
    let result = query(&raw).and_then(|q| {
        let a = q
            .get("a")
            .ok_or_else(|| ApiError::parse("query parameter `a` is required"))?;
        let b = q
            .get("b")
            .ok_or_else(|| ApiError::parse("query parameter `b` is required"))?;
        s.explore_pair(&auth(&headers), &id, a, b)
    });
    respond(result)
}

async fn features(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.features(&auth(&headers), &id))
}

async fn selections(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>, bytes: Bytes) -> Response {
    respond(body(&bytes).and_then(|req| s.record_selections(&auth(&headers), &id, req)))
}

async fn deliberation_csv(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    match s.deliberation_csv(&auth(&headers), &id) {
        Ok(csv) => (StatusCode::OK, [(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response(),
        Err(e) => respond(Err(e)),
    }
}

async fn deliberation_json(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.deliberation_json(&auth(&headers), &id))
}

async fn tally(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.tally(&auth(&headers), &id))
}

async fn consensus(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>, bytes: Bytes) -> Response {
    let parsed = if bytes.is_empty() {
        Ok(Default::default())
    } else {
        body(&bytes)
    };
    respond(parsed.and_then(|req| s.finalize(&auth(&headers), &id, req)))
}

async fn train(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.start_training(&auth(&headers), &id))
}

async fn models(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.models(&auth(&headers), &id))
}

async fn weights(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    respond(s.weights(&auth(&headers), &id))
}

async fn compare(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Response {
    let result = query(&raw).and_then(|q| {
        let other = q
            .get("other")
            .ok_or_else(|| ApiError::parse("query parameter `other` is required"))?;
        s.compare(&auth(&headers), &id, other)
    });
    respond(result)
}

async fn performance(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Response {
    respond(query(&raw).and_then(|q| s.performance(&auth(&headers), &id, q.get("on").map(String::as_str))))
}

async fn fairness(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Response {
    let result = query(&raw).and_then(|q| {
        s.fairness(
            &auth(&headers),
            &id,
            q.get("feature").map(String::as_str),
            q.get("definition").map(String::as_str),
            q.get("on").map(String::as_str),
        )
    });
    respond(result)
}

async fn personas(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Response {
    let result = query(&raw).and_then(|q| {
        let params = PersonaParams {
            model: q.get("model").cloned(),
            actual: q.get("actual").cloned(),
            f1: q.get("f1").cloned(),
            f2: q.get("f2").cloned(),
            f3: q.get("f3").cloned(),
            cursor: q.get("cursor").cloned(),
            page_size: q.get("page_size").cloned(),
        };
        s.personas(&auth(&headers), &id, &params)
    });
    respond(result)
}

async fn prompt(State(s): State<Shared>, headers: HeaderMap, Path((id, screen)): Path<(String, String)>) -> Response {
    respond(s.prompt(&auth(&headers), &id, &screen))
}

async fn fallback() -> Response {
    respond(Err(ApiError::new("NotFound", "no such endpoint")))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/admin/sessions", post(create_session).get(list_sessions))
        .route("/admin/sessions/{id}/deliberation.csv", get(deliberation_csv))
        .route("/admin/sessions/{id}/deliberation.json", get(deliberation_json))
        .route("/admin/sessions/{id}/consensus", post(consensus))
        .route("/admin/sessions/{id}/train", post(train))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/explore", get(explore_pair))
        .route("/sessions/{id}/explore/{feature}", get(explore_feature))
        .route("/sessions/{id}/features", get(features))
        .route("/sessions/{id}/selections", post(selections))
        .route("/sessions/{id}/tally", get(tally))
        .route("/sessions/{id}/models", get(models))
        .route("/sessions/{id}/prompts/{screen}", get(prompt))
        .route("/models/{id}/weights", get(weights))
        .route("/models/{id}/compare", get(compare))
        .route("/models/{id}/performance", get(performance))
        .route("/models/{id}/fairness", get(fairness))
        .route("/models/{id}/personas", get(personas))
        .fallback(fallback)
        .with_state(service)
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {reason}")]
    BindFailure { addr: String, reason: String },
    #[error("storage: {0}")]
    StorageFailure(String),
    #[error("dataset: {0}")]
    IngestFailure(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::BindFailure { .. } => "BindFailure",
            ServeError::StorageFailure(_) => "StorageFailure",
            ServeError::IngestFailure(_) => "IngestFailure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub bind: String,
    pub storage: PathBuf,
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub tiers: Option<PathBuf>,
    pub awards: Option<PathBuf>,
    pub dataset_id: String,
    pub settings: SessionSettings,
    pub admin_token: Option<String>,
    pub snapshot_every: u64,
}

impl ServeConfig {
    pub fn new(storage: impl Into<PathBuf>) -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
            storage: storage.into(),
            dataset: None,
            schema: None,
            tiers: None,
            awards: None,
            dataset_id: "default".into(),
            settings: SessionSettings::default(),
            admin_token: None,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        }
    }
}

/// Opens storage, registers the configured dataset and returns the service.
/// Without a dataset path the bundled fixture is used when no dataset with
/// the configured id is stored yet.
pub fn prepare(config: &ServeConfig) -> Result<Arc<Service>, ServeError> {
    let service = Service::open(ServiceConfig {
        storage: config.storage.clone(),
        snapshot_every: config.snapshot_every,
        admin_token: config.admin_token.clone(),
        settings: config.settings.clone(),
        dataset_id: config.dataset_id.clone(),
    })
    .map_err(|e| match e.code.as_str() {
        "StorageFailure" => ServeError::StorageFailure(e.message),
        _ => ServeError::IngestFailure(e.to_string()),
    })?;
    let read = |p: &PathBuf| {
        std::fs::read_to_string(p).map_err(|e| ServeError::IngestFailure(format!("{}: {e}", p.display())))
    };
    let input = match (&config.dataset, &config.schema) {
        (Some(d), Some(s)) => Some(IngestInput {
            data_csv: read(d)?,
            schema_toml: read(s)?,
            tiers_csv: config.tiers.as_ref().map(read).transpose()?,
            awards_csv: config.awards.as_ref().map(read).transpose()?,
        }),
        (None, None) if !service.state().datasets.contains_key(&config.dataset_id) => Some(IngestInput {
            data_csv: deliberate_core::fixtures::APPLICANTS.to_string(),
            schema_toml: deliberate_core::fixtures::SCHEMA.to_string(),
            tiers_csv: None,
            awards_csv: None,
        }),
        (None, None) => None,
        _ => {
            return Err(ServeError::IngestFailure(
                "dataset and schema paths must be given together".into(),
            ))
        }
    };
    if let Some(input) = input {
        service
            .ingest(&Auth::Local, &config.dataset_id, &input)
            .map_err(|e| ServeError::IngestFailure(e.to_string()))?;
    }
    Ok(Arc::new(service))
}

/// Runs the service until Ctrl-C, then writes a final snapshot.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let service = prepare(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|e| ServeError::BindFailure {
            addr: config.bind.clone(),
            reason: e.to_string(),
        })?;
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, storage = %config.storage.display(), "listening");
    axum::serve(listener, router(Arc::clone(&service)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServeError::StorageFailure(e.to_string()))?;
    service.flush().map_err(|e| ServeError::StorageFailure(e.message))
}
