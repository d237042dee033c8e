//! HTTP/1.1 routes for the collector.
//!
//! | route | auth |
//! |---|---|
//! | `POST /api/v1/agents/register` | registration key, if configured |
//! | `POST /api/v1/events:batch` | agent `X-Secret-Key` + `X-Install-Guid` |
//! | `GET /api/v1/events` | reader key in `X-Secret-Key` |
//! | `GET /api/v1/stats` | reader key |
//! | `GET /api/v1/analytics/over-time` | reader key |
//! | `GET /api/v1/analytics/breakdown` | reader key |
//! | `GET /api/v1/health` | none |
//!
//! A batch answers 200 with a receipt even when some elements are rejected;
//! 401 is reserved for credential failures and 413 for oversize batches.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::{Collector, CollectorError, Credentials};
use crate::analytics::{self, AnalyticsError, Dimension, SeriesFilter, TimeRange};
use crate::envelope::{parse_document, parse_uuid_strict};
use crate::store::{Cursor, ScanFilter, StoreError};
use crate::time::Timestamp;

pub const HEADER_SECRET_KEY: &str = "x-secret-key";
pub const HEADER_INSTALL_GUID: &str = "x-install-guid";
pub const DEFAULT_PULL_LIMIT: usize = 1_000;
const BODY_LIMIT: usize = 256 * 1024 * 1024;

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "BadRequest",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "kind": self.kind, "error": self.message }))).into_response()
    }
}

impl From<CollectorError> for ApiError {
    fn from(e: CollectorError) -> Self {
        let (status, kind) = match &e {
            CollectorError::Unauthorized => (StatusCode::UNAUTHORIZED, "Unauthorized"),
            CollectorError::BatchTooLarge(_) => (StatusCode::PAYLOAD_TOO_LARGE, "BatchTooLarge"),
            CollectorError::BadRequest(_) => (StatusCode::BAD_REQUEST, "BadRequest"),
            CollectorError::Store(StoreError::BadCursor(_)) => (StatusCode::BAD_REQUEST, "BadCursor"),
            CollectorError::Store(StoreError::BadLimit(_)) => (StatusCode::BAD_REQUEST, "BadLimit"),
            CollectorError::Store(StoreError::StorageFull { .. }) => (StatusCode::INSUFFICIENT_STORAGE, "StorageFull"),
            CollectorError::Store(_) | CollectorError::Registry(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        ApiError {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Store(s) => CollectorError::Store(s).into(),
            AnalyticsError::BadRange(_) => ApiError {
                status: StatusCode::BAD_REQUEST,
                kind: "BadRange",
                message: e.to_string(),
            },
            AnalyticsError::BadDimension(_) => ApiError {
                status: StatusCode::BAD_REQUEST,
                kind: "BadDimension",
                message: e.to_string(),
            },
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn agent_credentials(headers: &HeaderMap) -> Result<Credentials, ApiError> {
    let parse = |name| header(headers, name).and_then(parse_uuid_strict);
    match (parse(HEADER_SECRET_KEY), parse(HEADER_INSTALL_GUID)) {
        (Some(secret_key), Some(install_guid)) => Ok(Credentials { secret_key, install_guid }),
        _ => Err(CollectorError::Unauthorized.into()),
    }
}

fn parse_time(name: &str, value: Option<&str>) -> ApiResult<Option<Timestamp>> {
    match value.filter(|v| !v.is_empty()) {
        None => Ok(None),
        Some(v) => Timestamp::parse_any_offset(v)
            .map(Some)
            .map_err(|_| ApiError::bad_request(format!("{name}: expected ISO-8601 timestamp"))),
    }
}

pub fn router(collector: Arc<Collector>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/agents/register", post(register))
        .route("/api/v1/events:batch", post(submit_batch))
        .route("/api/v1/events", get(pull))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/health", get(health))
        .route("/api/v1/analytics/over-time", get(over_time))
        .route("/api/v1/analytics/breakdown", get(breakdown))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(collector);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Deserialize)]
struct RegisterBody {
    code_name: String,
    full_name: String,
}

async fn register(State(c): State<Arc<Collector>>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<Value>> {
    c.check_registration_key(header(&headers, HEADER_SECRET_KEY))?;
    let body: RegisterBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let reg = tokio::task::spawn_blocking(move || c.register_agent(&body.code_name, &body.full_name))
        .await
        .expect("register task")?;
    Ok(Json(serde_json::to_value(reg).expect("registration serializes")))
}

async fn submit_batch(State(c): State<Arc<Collector>>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<Value>> {
    let creds = agent_credentials(&headers)?;
    c.authenticate(&creds)?;
    let doc = parse_document(&body).map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))?;
    let Value::Array(batch) = doc else {
        return Err(ApiError::bad_request("body must be a JSON array of envelopes"));
    };
    let receipt = tokio::task::spawn_blocking(move || c.submit_events(&creds, &batch))
        .await
        .expect("submit task")?;
    Ok(Json(serde_json::to_value(receipt).expect("receipt serializes")))
}

#[derive(Deserialize, Default)]
pub struct PullQuery {
    pub cursor: Option<String>,
    pub limit: Option<usize>,
    pub install_guid: Option<String>,
    pub event_type: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
}

async fn pull(State(c): State<Arc<Collector>>, headers: HeaderMap, Query(q): Query<PullQuery>) -> ApiResult<Json<Value>> {
    c.authenticate_reader(header(&headers, HEADER_SECRET_KEY))?;
    let cursor = Cursor::parse(q.cursor.as_deref().unwrap_or("")).map_err(|e| CollectorError::Store(e.into()))?;
    let install_guid = match q.install_guid.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(g) => Some(parse_uuid_strict(g).ok_or_else(|| ApiError::bad_request("install_guid: expected UUID"))?),
    };
    let filter = ScanFilter {
        install_guid,
        event_type: q.event_type.filter(|s| !s.is_empty()),
        from: parse_time("from", q.from.as_deref())?,
        to: parse_time("to", q.to.as_deref())?,
    };
    let limit = q.limit.unwrap_or(DEFAULT_PULL_LIMIT);
    let page = tokio::task::spawn_blocking(move || c.pull_events(header(&headers, HEADER_SECRET_KEY), &cursor, limit, &filter))
        .await
        .expect("pull task")?;
    Ok(Json(serde_json::to_value(page).expect("page serializes")))
}

async fn stats(State(c): State<Arc<Collector>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    c.authenticate_reader(header(&headers, HEADER_SECRET_KEY))?;
    let partitions: Vec<Value> = c
        .store()
        .stats()
        .into_iter()
        .map(|(key, s)| json!({ "partition": key, "stats": s }))
        .collect();
    Ok(Json(json!({ "partitions": partitions })))
}

async fn health(State(c): State<Arc<Collector>>) -> Json<Value> {
    Json(serde_json::to_value(c.health()).expect("health serializes"))
}

#[derive(Deserialize)]
struct SeriesQuery {
    from: Option<String>,
    to: Option<String>,
    event_type: Option<String>,
    install_guid: Option<String>,
    dimension: Option<String>,
}

fn range_of(q: &SeriesQuery) -> ApiResult<TimeRange> {
    let from = parse_time("from", q.from.as_deref())?.ok_or_else(|| ApiError::bad_request("from is required"))?;
    let to = parse_time("to", q.to.as_deref())?.ok_or_else(|| ApiError::bad_request("to is required"))?;
    Ok(TimeRange::new(from, to)?)
}

async fn over_time(State(c): State<Arc<Collector>>, headers: HeaderMap, Query(q): Query<SeriesQuery>) -> ApiResult<Json<Value>> {
    c.authenticate_reader(header(&headers, HEADER_SECRET_KEY))?;
    let range = range_of(&q)?;
    let install_guid = match q.install_guid.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(g) => Some(parse_uuid_strict(g).ok_or_else(|| ApiError::bad_request("install_guid: expected UUID"))?),
    };
    let filter = SeriesFilter {
        install_guid,
        event_type: q.event_type.filter(|s| !s.is_empty()),
    };
    let series = tokio::task::spawn_blocking(move || analytics::events_over_time(c.store(), &range, &filter))
        .await
        .expect("analytics task")?;
    Ok(Json(serde_json::to_value(series).expect("series serializes")))
}

async fn breakdown(State(c): State<Arc<Collector>>, headers: HeaderMap, Query(q): Query<SeriesQuery>) -> ApiResult<Json<Value>> {
    c.authenticate_reader(header(&headers, HEADER_SECRET_KEY))?;
    let range = range_of(&q)?;
    let dimension: Dimension = q
        .dimension
        .as_deref()
        .ok_or_else(|| ApiError::bad_request("dimension is required"))?
        .parse()?;
    let series = tokio::task::spawn_blocking(move || analytics::breakdown(c.store(), dimension, &range))
        .await
        .expect("analytics task")?;
    Ok(Json(serde_json::to_value(series).expect("series serializes")))
}

/// An HTTP server running on its own thread and runtime; stops on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(app: Router, addr: SocketAddr) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name(format!("http-{addr}")).spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .expect("tokio runtime");
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("server");
            });
        })?;
        Ok(BackgroundServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
