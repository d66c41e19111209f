use std::collections::VecDeque;
use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::Stream;
use needcraft_core::needs_memo::{NeedId, UserEdit};
use needcraft_core::orchestrator::{SessionMode, UserInput};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::ServiceError;
use crate::manager::SessionManager;
use crate::store::SeqEvent;

pub const EVENT_SEQ_HEADER: &str = "x-event-seq";
pub const BUSY_HEADER: &str = "x-session-busy";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub query: String,
    #[serde(default = "default_mode")]
    pub mode: SessionMode,
    #[serde(default)]
    pub tag: Option<String>,
}

fn default_mode() -> SessionMode {
    SessionMode::Care
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageAction {
    Skip,
    SkipGroup,
    Retry,
}

/// Either `{"text": ...}` or `{"action": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostMessage {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub action: Option<MessageAction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeedBody {
    pub need: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SinceQuery {
    #[serde(default)]
    pub since: Option<u64>,
}

/// RFC 9457 problem document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Problem {
    #[serde(rename = "type")]
    pub kind: String,
    pub title: String,
    pub status: u16,
    pub detail: String,
    pub code: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let code = self.code();
        let problem = Problem {
            kind: format!("urn:needcraft:error:{code}"),
            title: code.to_string(),
            status,
            detail: self.to_string(),
            code: code.to_string(),
        };
        let mut response = (
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(problem),
        )
            .into_response();
        response
            .headers_mut()
            .insert("content-type", HeaderValue::from_static("application/problem+json"));
        response
    }
}

pub fn router(manager: SessionManager) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/panels", get(get_panels))
        .route("/sessions/{id}/needs", post(add_need))
        .route("/sessions/{id}/needs/{need_id}", patch(update_need).delete(delete_need))
        .route("/sessions/{id}/events", get(events))
        .with_state(manager)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

async fn create_session(
    State(m): State<SessionManager>,
    Json(body): Json<CreateSession>,
) -> Result<impl IntoResponse, ServiceError> {
    let handle = m.create_session(&body.query, body.mode, body.tag)?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_sessions(State(m): State<SessionManager>) -> impl IntoResponse {
    Json(m.list())
}

async fn get_session(State(m): State<SessionManager>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(m.handle(&id)?))
}

async fn post_message(
    State(m): State<SessionManager>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> Result<impl IntoResponse, ServiceError> {
    let accepted = match (body.text, body.action) {
        (Some(text), None) => m.post_message(&id, UserInput::message(text))?,
        (None, Some(MessageAction::Skip)) => m.post_message(&id, UserInput::Skip)?,
        (None, Some(MessageAction::SkipGroup)) => m.post_message(&id, UserInput::SkipGroup)?,
        (None, Some(MessageAction::Retry)) => m.retry(&id)?,
        _ => return Err(ServiceError::BadRequest("send exactly one of text or action".into())),
    };
    Ok((StatusCode::ACCEPTED, Json(Accepted { accepted })))
}

async fn get_panels(State(m): State<SessionManager>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    let at = m.panels(&id)?;
    let mut headers = HeaderMap::new();
    headers.insert(EVENT_SEQ_HEADER, HeaderValue::from(at.event_seq));
    headers.insert(BUSY_HEADER, HeaderValue::from_static(if at.busy { "true" } else { "false" }));
    Ok((headers, Json(at.panels)))
}

fn parse_need_id(raw: &str) -> Result<NeedId, ServiceError> {
    raw.parse()
        .map_err(|_| ServiceError::BadRequest(format!("{raw:?} is not a need id")))
}

async fn add_need(
    State(m): State<SessionManager>,
    Path(id): Path<String>,
    Json(body): Json<NeedBody>,
) -> Result<impl IntoResponse, ServiceError> {
    let receipt = m.edit_need(&id, UserEdit::AddManual { need: body.need }).await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn update_need(
    State(m): State<SessionManager>,
    Path((id, need_id)): Path<(String, String)>,
    Json(body): Json<NeedBody>,
) -> Result<impl IntoResponse, ServiceError> {
    let edit = UserEdit::Update {
        id: parse_need_id(&need_id)?,
        need: body.need,
    };
    Ok(Json(m.edit_need(&id, edit).await?))
}

async fn delete_need(
    State(m): State<SessionManager>,
    Path((id, need_id)): Path<(String, String)>,
) -> Result<impl IntoResponse, ServiceError> {
    let edit = UserEdit::Delete {
        id: parse_need_id(&need_id)?,
    };
    Ok(Json(m.edit_need(&id, edit).await?))
}

struct Feed {
    manager: SessionManager,
    id: String,
    last: u64,
    pending: VecDeque<SeqEvent>,
    rx: broadcast::Receiver<SeqEvent>,
}

fn sse_event(item: &SeqEvent) -> Event {
    Event::default()
        .id(item.seq.to_string())
        .event(item.event.kind())
        .data(serde_json::to_string(item).expect("event serializes"))
}

/// Replays history after the cursor, then follows the live feed. A lagging
/// subscriber is caught up from history.
fn event_stream(feed: Feed) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(feed, |mut feed| async move {
        loop {
            if let Some(item) = feed.pending.pop_front() {
                if item.seq <= feed.last {
                    continue;
                }
                feed.last = item.seq;
                let event = sse_event(&item);
                return Some((Ok(event), feed));
            }
            match feed.rx.recv().await {
                Ok(item) => feed.pending.push_back(item),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let missed = feed.manager.events_since(&feed.id, feed.last).ok()?;
                    feed.pending.extend(missed);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn events(
    State(m): State<SessionManager>,
    Path(id): Path<String>,
    Query(q): Query<SinceQuery>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ServiceError> {
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let since = q.since.or(last_event_id).unwrap_or(0);
    let (history, rx) = m.subscribe(&id, since)?;
    let feed = Feed {
        manager: m,
        id,
        last: since,
        pending: history.into(),
        rx,
    };
    Ok(Sse::new(event_stream(feed)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
