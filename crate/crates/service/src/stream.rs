//! Session stream over WebSocket.
//!
//! A client connects to `/sessions/{id}/stream?after=N` and first receives
//! the transcript after `N`, then live events. Live events at or below the
//! last delivered transcript seq are dropped, so a reconnect never renders
//! anything twice. Suppressed cards are never emitted.

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::response::Response;
use oncall_core::domain::SessionId;
use serde::Deserialize;
use tokio::sync::broadcast::error::RecvError;
use tracing::debug;

use crate::api::{ApiError, AppState};
use crate::app::StreamEvent;

#[derive(Debug, Default, Deserialize)]
pub struct StreamQuery {
    #[serde(default)]
    pub after: u64,
}

pub async fn handler(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let sid = SessionId::new(id);
    if st.app.engine.session(&sid).is_none() {
        return Err(ApiError::new(axum::http::StatusCode::NOT_FOUND, format!("unknown session {sid}")));
    }
    Ok(ws.on_upgrade(move |socket| run(socket, st, sid, q.after)))
}

struct Cursor {
    last: u64,
    closed: bool,
}

impl Cursor {
    /// Whether `ev` is new to this client; advances the cursor if so.
    fn admit(&mut self, ev: &StreamEvent) -> bool {
        match ev {
            StreamEvent::Closed { .. } => !std::mem::replace(&mut self.closed, true),
            _ => match ev.cursor() {
                Some(seq) if seq <= self.last => false,
                Some(seq) => {
                    self.last = seq;
                    true
                }
                None => true,
            },
        }
    }
}

async fn send(socket: &mut WebSocket, ev: &StreamEvent) -> bool {
    let text = serde_json::to_string(ev).expect("stream events serialize");
    socket.send(WsMessage::Text(text.into())).await.is_ok()
}

async fn catch_up(socket: &mut WebSocket, st: &AppState, sid: &SessionId, cur: &mut Cursor) -> bool {
    let Some(session) = st.app.engine.session(sid) else {
        return false;
    };
    for ev in StreamEvent::backlog(&session, cur.last) {
        if cur.admit(&ev) && !send(socket, &ev).await {
            return false;
        }
    }
    true
}

async fn run(mut socket: WebSocket, st: AppState, sid: SessionId, after: u64) {
    // subscribe before reading the backlog so nothing falls in between
    let mut rx = st.app.hub.subscribe(&sid);
    let mut shutdown = st.shutdown.clone();
    let mut cur = Cursor { last: after, closed: false };
    if !catch_up(&mut socket, &st, &sid, &mut cur).await {
        return;
    }
    while !cur.closed {
        tokio::select! {
            got = rx.recv() => match got {
                Ok(ev) => {
                    if cur.admit(&ev) && !send(&mut socket, &ev).await {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    debug!(session = %sid, skipped = n, "stream lagged; resending from transcript");
                    if !catch_up(&mut socket, &st, &sid, &mut cur).await {
                        return;
                    }
                }
                Err(RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => break,
        }
    }
    let _ = socket.send(WsMessage::Close(None)).await;
}
