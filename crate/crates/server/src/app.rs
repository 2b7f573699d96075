//! HTTP API.
//!
//! | route | body / query | response |
//! |---|---|---|
//! | `POST /api/sessions` | `{domain_id, feature_config_id}` | `{session_id}` |
//! | `POST /api/sessions/{id}/turns` | `{text}` or `{record}` | `{user, system, first_seq}` |
//! | `GET /api/sessions/{id}` | | session summary |
//! | `GET /api/sessions/{id}/events` | `?from=N` | event stream |
//! | `GET /api/features` | `?config=ID` | feature definitions |
//! | `POST /api/sessions/{id}/replay-source` | multipart file | `{turns, skipped}` |
//! | `GET /api/sessions/{id}/archive` | | session archive |
//!
//! Errors are `{error, message}` with `error` one of `unknown_domain`,
//! `unknown_config`, `unknown_session`, `terminal_session`,
//! `validation_error`, `bad_request`.
//!
//! The event stream is served as server-sent events: one `data:` line
//! holding a JSON event per message, with the event's seq as `id:`. A
//! reconnecting client may send `Last-Event-ID` instead of `from`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Multipart, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use phonconv::session::{SessionError, SessionEvent, TurnInput};

use crate::hub::{Hub, HubError};

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(summary))
        .route("/api/sessions/{id}/turns", post(post_turn))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/sessions/{id}/replay-source", post(replay_source))
        .route("/api/sessions/{id}/archive", get(archive))
        .route("/api/features", get(features))
        .with_state(hub)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl From<HubError> for ApiError {
    fn from(err: HubError) -> Self {
        let (status, code) = match &err {
            HubError::UnknownDomain(_) => (StatusCode::NOT_FOUND, "unknown_domain"),
            HubError::UnknownConfig(_) => (StatusCode::NOT_FOUND, "unknown_config"),
            HubError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            HubError::Session(SessionError::TerminalSession(_)) => {
                (StatusCode::CONFLICT, "terminal_session")
            }
            HubError::Session(SessionError::Validation(_)) | HubError::Source { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation_error")
            }
            HubError::Ambiguous(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            HubError::Session(_) | HubError::InvalidResource(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_resources")
            }
        };
        Self {
            status,
            code,
            message: err.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    domain_id: Option<String>,
    feature_config_id: Option<String>,
}

async fn create_session(
    State(hub): State<Arc<Hub>>,
    body: Option<Json<CreateSession>>,
) -> ApiResult<Response> {
    let (domain, config) = match &body {
        Some(Json(b)) => (b.domain_id.as_deref(), b.feature_config_id.as_deref()),
        None => (None, None),
    };
    let id = hub.create_session(domain, config)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn summary(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(hub.summary(&id)?).into_response())
}

async fn post_turn(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let input: TurnInput = serde_json::from_slice(&body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        code: "validation_error",
        message: format!("body must be {{\"text\": ...}} or {{\"record\": ...}}: {e}"),
    })?;
    Ok(Json(hub.post_turn(&id, input)?).into_response())
}

async fn archive(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(hub.archive(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct FeatureQuery {
    config: Option<String>,
}

async fn features(
    State(hub): State<Arc<Hub>>,
    Query(q): Query<FeatureQuery>,
) -> ApiResult<Response> {
    Ok(Json(hub.features(q.config.as_deref())?).into_response())
}

async fn replay_source(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    mut multipart: Multipart,
) -> ApiResult<Response> {
    let mut text = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let data = field
            .text()
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        text.get_or_insert_with(String::new).push_str(&data);
    }
    let text = text.ok_or_else(|| ApiError::bad_request("no file in upload"))?;
    Ok(Json(hub.run_source(&id, &text)?).into_response())
}

#[derive(Debug, Deserialize)]
struct EventQuery {
    from: Option<u64>,
}

/// Backlog from `from`, then live events. Seqs already delivered are
/// skipped; a subscriber that falls too far behind is disconnected and
/// can resume with `from` set to the next seq it needs.
fn event_stream(
    backlog: Vec<SessionEvent>,
    rx: tokio::sync::broadcast::Receiver<SessionEvent>,
    from: u64,
) -> impl Stream<Item = SessionEvent> {
    let next = backlog.last().map_or(from, |e| e.seq + 1);
    let live = stream::unfold((rx, next), |(mut rx, next)| async move {
        loop {
            match rx.recv().await {
                Ok(event) if event.seq < next => continue,
                Ok(event) if event.seq == next => return Some((event, (rx, next + 1))),
                Ok(event) => {
                    log::warn!("event stream gap: expected {next}, got {}", event.seq);
                    return None;
                }
                Err(RecvError::Lagged(n)) => {
                    log::warn!("subscriber lagged by {n} events; closing stream");
                    return None;
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    stream::iter(backlog).chain(live)
}

async fn events(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1);
    let from = q.from.or(resume).unwrap_or(0);
    let (backlog, rx) = hub.subscribe(&id, from)?;
    let stream = event_stream(backlog, rx, from).map(|event| {
        let data = serde_json::to_string(&event).expect("event serializes");
        Ok(Event::default().id(event.seq.to_string()).data(data))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
