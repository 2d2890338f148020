//! HTTP routes. Engine calls run on the blocking pool; the engine itself
//! serializes events per session and assigns their seq under the session lock.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oncall_core::domain::{
    AuthorRole, CardId, EntryId, EntryKind, EntryStatus, Message, MessageId, Provenance, ScopeClass, SessionId, SessionState,
    TrackedQuestion,
};
use oncall_core::engine::{CardView, Effect, EngineMetrics, EventOutcome, SessionEvent};
use oncall_core::error::{DomainError, EngineError, StoreError};
use oncall_core::improve::ReviewSummary;
use oncall_core::kb::{MutationCause, MutationOp, MutationRecord, StoreStats};
use oncall_core::scope::ScopeVerdict;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{watch, Notify};
use tracing::debug;

use crate::app::App;
use crate::stream;

#[derive(Clone)]
pub struct AppState {
    pub app: Arc<App>,
    /// Wakes the review lane after a close.
    pub reviews: Arc<Notify>,
    pub shutdown: watch::Receiver<bool>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::UnknownSession(_) | EngineError::UnknownCard(_) => StatusCode::NOT_FOUND,
            EngineError::SessionExists(_) | EngineError::StaleEvent { .. } | EngineError::CardNotAcceptable(_) => StatusCode::CONFLICT,
            EngineError::Domain(DomainError::SessionClosed(_)) => StatusCode::CONFLICT,
            EngineError::Domain(_) => StatusCode::BAD_REQUEST,
            EngineError::Store(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        Self::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/stream", get(stream::handler))
        .route("/cards/{id}/accept", post(accept_card))
        .route("/kb/entries", get(list_entries))
        .route("/kb/entries/{id}", get(get_entry))
        .route("/metrics", get(metrics))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EventAck {
    pub seq: u64,
    pub session_id: SessionId,
}

async fn create_session(State(st): State<AppState>, body: Option<Json<CreateSession>>) -> ApiResult<(StatusCode, Json<EventAck>)> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let app = st.app.clone();
    let out = blocking(move || {
        let id = SessionId::new(req.session_id.unwrap_or_else(|| app.fresh_id("session")));
        Ok(app.engine.submit(SessionEvent::SessionOpened { session_id: id })?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(ack(&out))))
}

fn ack(out: &EventOutcome) -> EventAck {
    EventAck { seq: out.seq, session_id: out.session_id.clone().expect("session events carry their session") }
}

async fn list_sessions(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": st.app.engine.session_ids() }))
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub state: SessionState,
    pub analyst_joined_seq: Option<u64>,
    /// Seq of the last event applied to the session.
    pub cursor: u64,
    pub messages: Vec<Message>,
    pub cards: Vec<CardView>,
    pub verdicts: Vec<ScopeVerdict>,
    pub questions: Vec<TrackedQuestion>,
    pub review: Option<ReviewSummary>,
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let sid = SessionId::new(id);
    let rec = st.app.engine.session_record(&sid).ok_or_else(|| ApiError::not_found(format!("unknown session {sid}")))?;
    let s = rec.session;
    Ok(Json(SessionView {
        session_id: s.id.clone(),
        state: s.state,
        analyst_joined_seq: s.analyst_joined_seq,
        cursor: rec.cursor,
        cards: s.cards.iter().map(CardView::from).collect(),
        messages: s.messages,
        verdicts: s.verdicts,
        questions: s.questions,
        review: rec.review,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub id: Option<String>,
    pub author: AuthorRole,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    pub at_ms: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct MessageAck {
    pub seq: u64,
    pub session_id: SessionId,
    pub message_id: MessageId,
    pub transcript_seq: Option<u64>,
    pub verdicts: Vec<ScopeClass>,
    pub cards: Vec<CardView>,
}

async fn post_message(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> ApiResult<(StatusCode, Json<MessageAck>)> {
    let app = st.app.clone();
    let sid = SessionId::new(id);
    let (mid, out) = blocking(move || {
        let mid = req.id.unwrap_or_else(|| app.fresh_id("msg"));
        let mut m = Message::new(mid.clone(), sid, req.author, req.text).with_attachments(req.attachments);
        if let Some(at) = req.at_ms {
            m = m.at(at);
        }
        Ok((MessageId::new(mid), app.engine.submit(SessionEvent::MessagePosted { message: m })?))
    })
    .await?;
    let mut ack = MessageAck {
        seq: out.seq,
        session_id: ack(&out).session_id,
        transcript_seq: None,
        message_id: mid,
        verdicts: Vec::new(),
        cards: Vec::new(),
    };
    for e in &out.effects {
        match e {
            Effect::Message { message } if message.id == ack.message_id => ack.transcript_seq = Some(message.seq),
            Effect::Verdict { verdict } if verdict.message_id == ack.message_id => ack.verdicts.push(verdict.scope),
            Effect::Card { card } => ack.cards.push(card.clone()),
            _ => {}
        }
    }
    Ok((StatusCode::ACCEPTED, Json(ack)))
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<EventAck>> {
    let app = st.app.clone();
    let out = blocking(move || Ok(app.engine.submit(SessionEvent::SessionClosed { session_id: SessionId::new(id) })?)).await?;
    if !st.app.engine.pending_reviews().is_empty() {
        st.reviews.notify_one();
    }
    Ok(Json(ack(&out)))
}

async fn accept_card(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let app = st.app.clone();
    let card_id = CardId::new(id);
    let cid = card_id.clone();
    let out = blocking(move || Ok(app.engine.submit(SessionEvent::CardAccepted { card_id: cid })?)).await?;
    let entry_id = out.effects.iter().find_map(|e| match e {
        Effect::Accepted { entry_id, .. } => Some(*entry_id),
        _ => None,
    });
    Ok(Json(json!({ "seq": out.seq, "card_id": card_id, "entry_id": entry_id.flatten() })))
}

#[derive(Debug, Default, Deserialize)]
pub struct EntryQuery {
    pub query: Option<String>,
    pub k: Option<usize>,
    pub kind: Option<EntryKind>,
}

#[derive(Debug, Serialize)]
pub struct EntryView {
    pub id: EntryId,
    pub kind: EntryKind,
    pub question: String,
    pub content: String,
    pub source: Provenance,
    pub status: EntryStatus,
    pub created_seq: u64,
    pub updated_seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl EntryView {
    fn new(e: &oncall_core::domain::KnowledgeEntry, score: Option<f64>) -> Self {
        Self {
            id: e.id,
            kind: e.kind,
            question: e.question.clone(),
            content: e.content.clone(),
            source: e.source.clone(),
            status: e.status,
            created_seq: e.created_seq,
            updated_seq: e.updated_seq,
            score,
        }
    }
}

/// One mutation as the history timeline shows it, without embeddings.
#[derive(Debug, Serialize)]
pub struct HistoryItem {
    pub version: u64,
    pub txn: u64,
    pub op: MutationOp,
    pub cause: MutationCause,
    pub question: Option<String>,
    pub content: Option<String>,
    pub status: Option<EntryStatus>,
}

impl From<&MutationRecord> for HistoryItem {
    fn from(r: &MutationRecord) -> Self {
        Self {
            version: r.version,
            txn: r.txn,
            op: r.op,
            cause: r.cause.clone(),
            question: r.payload.as_ref().map(|p| p.question.clone()),
            content: r.payload.as_ref().map(|p| p.content.clone()),
            status: r.payload.as_ref().map(|p| p.status),
        }
    }
}

const DEFAULT_K: usize = 10;

async fn list_entries(State(st): State<AppState>, Query(q): Query<EntryQuery>) -> ApiResult<Json<serde_json::Value>> {
    let app = st.app.clone();
    let query = q.query.filter(|s| !s.trim().is_empty());
    let entries = blocking(move || {
        let store = app.engine.store();
        Ok(match query {
            Some(text) => {
                debug!(query = %text, "kb search");
                let hits = store.search(app.engine.gateway(), &text, q.kind, q.k.unwrap_or(DEFAULT_K))?;
                let snap = store.view();
                hits.iter().filter_map(|h| snap.get(h.entry_id).map(|e| EntryView::new(e, Some(h.score)))).collect::<Vec<_>>()
            }
            None => {
                let snap = store.view();
                let all = snap.entries.values().filter(|e| q.kind.is_none_or(|k| e.kind == k));
                all.map(|e| EntryView::new(e, None)).collect()
            }
        })
    })
    .await?;
    Ok(Json(json!({ "entries": entries })))
}

async fn get_entry(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let id: EntryId = id.parse().map_err(|e: DomainError| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let store = st.app.engine.store();
    let history: Vec<HistoryItem> = store.history(id).iter().map(HistoryItem::from).collect();
    if history.is_empty() {
        return Err(ApiError::not_found(format!("entry {id} never existed")));
    }
    let entry = store.view().get(id).map(|e| EntryView::new(e, None));
    Ok(Json(json!({ "entry": entry, "history": history })))
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    pub engine: EngineMetrics,
    pub store: StoreStats,
    pub sessions: usize,
    pub pending_reviews: usize,
    pub stream_subscribers: usize,
}

async fn metrics(State(st): State<AppState>) -> Json<MetricsView> {
    let e = &st.app.engine;
    Json(MetricsView {
        engine: e.metrics(),
        store: e.store().stats(),
        sessions: e.session_ids().len(),
        pending_reviews: e.pending_reviews().len(),
        stream_subscribers: st.app.hub.subscribers(),
    })
}
