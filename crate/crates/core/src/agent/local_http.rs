//! Loopback HTTP endpoint through which a review UI drives an agent.
//!
//! | route | body |
//! |---|---|
//! | `GET /local/events?keyword&application&from&to&state` | list of local events |
//! | `GET /local/status` | pending / submitted counts |
//! | `POST /local/submit` | `{"ids": [...]}` → per-event receipt |

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{submit_selected, Buffer, BufferError, EventState, LocalEvent, ReviewFilter, SubmitError, Transport};
use crate::time::Timestamp;

#[derive(Clone)]
struct LocalState {
    buffer: Arc<Buffer>,
    transport: Arc<dyn Transport>,
}

pub fn router(buffer: Arc<Buffer>, transport: Arc<dyn Transport>, ui_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/local/events", get(list))
        .route("/local/status", get(status))
        .route("/local/submit", post(submit))
        .with_state(LocalState { buffer, transport });
    match ui_dir {
        Some(dir) => app.nest_service("/ui", tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

struct LocalError(StatusCode, String);

impl IntoResponse for LocalError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub keyword: Option<String>,
    pub application: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
    pub state: Option<String>,
}

impl ListQuery {
    fn to_filter(&self) -> Result<ReviewFilter, LocalError> {
        let bad = |m: String| LocalError(StatusCode::BAD_REQUEST, m);
        let time = |name: &str, v: &Option<String>| -> Result<Option<Timestamp>, LocalError> {
            match v.as_deref().filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => Timestamp::parse_any_offset(s).map(Some).map_err(|e| bad(format!("{name}: {e}"))),
            }
        };
        let nonempty = |v: &Option<String>| v.clone().filter(|s| !s.is_empty());
        Ok(ReviewFilter {
            keyword: nonempty(&self.keyword),
            application: nonempty(&self.application),
            from: time("from", &self.from)?,
            to: time("to", &self.to)?,
            state: match nonempty(&self.state) {
                None => None,
                Some(s) => Some(s.parse::<EventState>().map_err(bad)?),
            },
        })
    }
}

async fn list(State(s): State<LocalState>, Query(q): Query<ListQuery>) -> Result<Json<Vec<LocalEvent>>, LocalError> {
    let filter = q.to_filter()?;
    Ok(Json(s.buffer.list_events(&filter)))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct LocalStatus {
    pub pending: usize,
    pub submitted: usize,
}

async fn status(State(s): State<LocalState>) -> Json<LocalStatus> {
    let pending = s.buffer.pending_count();
    Json(LocalStatus {
        pending,
        submitted: s.buffer.len() - pending,
    })
}

#[derive(Debug, Deserialize)]
pub struct SubmitRequest {
    pub ids: Vec<String>,
}

/// Outcome for one submitted id.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EventOutcome {
    pub id: String,
    /// `submitted` or `rejected`.
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LocalReceipt {
    pub accepted: usize,
    pub duplicates: usize,
    pub events: Vec<EventOutcome>,
}

async fn submit(State(s): State<LocalState>, Json(req): Json<SubmitRequest>) -> Result<Json<LocalReceipt>, LocalError> {
    let ids = req.ids;
    let joined = tokio::task::spawn_blocking(move || {
        let result = submit_selected(&s.buffer, &ids, &s.transport);
        (result, ids, s.buffer)
    })
    .await
    .map_err(|e| LocalError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (result, ids, buffer) = joined;
    let receipt = match result {
        Ok(r) | Err(SubmitError::PartialRejection(r)) => r,
        Err(SubmitError::Buffer(e @ (BufferError::UnknownEvent(_) | BufferError::NotPending(_)))) => {
            return Err(LocalError(StatusCode::CONFLICT, e.to_string()))
        }
        Err(SubmitError::Transport(e)) => return Err(LocalError(StatusCode::BAD_GATEWAY, e.to_string())),
        Err(e) => return Err(LocalError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    };
    let events = ids
        .into_iter()
        .map(|id| {
            let event = buffer.get(&id);
            let submitted = event.as_ref().is_some_and(|e| e.state == EventState::Submitted);
            EventOutcome {
                outcome: if submitted { "submitted" } else { "rejected" }.into(),
                error: if submitted { None } else { event.and_then(|e| e.last_error) },
                id,
            }
        })
        .collect();
    Ok(Json(LocalReceipt {
        accepted: receipt.accepted,
        duplicates: receipt.duplicates,
        events,
    }))
}
