//! Engine assembly and the per-session event hub behind the stream endpoint.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use oncall_core::domain::{CardId, EntryId, Message, Session, SessionId, SessionState};
use oncall_core::engine::{CardView, Effect, Engine, EngineState};
use oncall_core::fetch::{DocumentFetcher, FixtureFetcher, HttpFetcher, NoFetch};
use oncall_core::gateway::Gateway;
use oncall_core::kb::{KnowledgeStore, SeedEntry};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tracing::{info, warn};

use crate::config::{FetchMode, ServiceConfig};
use crate::error::ServiceError;

const STREAM_CAPACITY: usize = 256;
const STATE_FILE: &str = "sessions.json";

/// One item on a session stream. `seq` is the transcript position, which a
/// reconnecting client passes back as `after`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Message { seq: u64, message: Message },
    Card { seq: u64, card: CardView },
    Accepted { card_id: CardId, entry_id: Option<EntryId> },
    Closed { session_id: SessionId },
}

impl StreamEvent {
    pub fn from_effect(effect: &Effect) -> Option<Self> {
        Some(match effect {
            Effect::Message { message } => Self::Message { seq: message.seq, message: message.clone() },
            Effect::Card { card } => Self::Card { seq: card.seq?, card: card.clone() },
            Effect::Accepted { card_id, entry_id } => Self::Accepted { card_id: card_id.clone(), entry_id: *entry_id },
            Effect::Closed { session_id } => Self::Closed { session_id: session_id.clone() },
            _ => return None,
        })
    }

    pub fn cursor(&self) -> Option<u64> {
        match self {
            Self::Message { seq, .. } | Self::Card { seq, .. } => Some(*seq),
            _ => None,
        }
    }

    /// Transcript items after `after`, then `Closed` for a closed session.
    pub fn backlog(session: &Session, after: u64) -> Vec<Self> {
        let mut out = Vec::new();
        for m in session.messages.iter().filter(|m| m.seq > after) {
            match m.card_id.as_ref().and_then(|id| session.card(id)) {
                Some(card) => out.push(Self::Card { seq: m.seq, card: CardView::from(card) }),
                None => out.push(Self::Message { seq: m.seq, message: m.clone() }),
            }
        }
        if session.state == SessionState::Closed {
            out.push(Self::Closed { session_id: session.id.clone() });
        }
        out
    }
}

/// Broadcast channel per session, fed by the engine listener while the
/// session is locked, so subscribers see effects in processing order.
#[derive(Debug, Default)]
pub struct Hub {
    channels: Mutex<HashMap<SessionId, broadcast::Sender<StreamEvent>>>,
}

impl Hub {
    fn sender(&self, id: &SessionId) -> broadcast::Sender<StreamEvent> {
        let mut map = self.channels.lock().expect("hub lock");
        map.entry(id.clone()).or_insert_with(|| broadcast::channel(STREAM_CAPACITY).0).clone()
    }

    pub fn subscribe(&self, id: &SessionId) -> broadcast::Receiver<StreamEvent> {
        self.sender(id).subscribe()
    }

    pub fn publish(&self, id: &SessionId, event: StreamEvent) {
        // no subscribers is fine
        let _ = self.sender(id).send(event);
    }

    pub fn subscribers(&self) -> usize {
        self.channels.lock().expect("hub lock").values().map(|s| s.receiver_count()).sum()
    }
}

pub struct App {
    pub engine: Arc<Engine>,
    pub hub: Arc<Hub>,
    pub config: ServiceConfig,
    state_path: Option<PathBuf>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for App {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("App").field("engine", &self.engine).field("state_path", &self.state_path).finish_non_exhaustive()
    }
}

fn fetcher(config: &ServiceConfig) -> Result<Arc<dyn DocumentFetcher>, ServiceError> {
    Ok(match config.fetch.mode {
        FetchMode::None => Arc::new(NoFetch),
        FetchMode::Http => Arc::new(HttpFetcher::new(Duration::from_millis(config.fetch.timeout_ms)).map_err(ServiceError::Startup)?),
        FetchMode::Fixture => {
            let path = config.fetch.documents.as_deref().expect("validated: fixture mode has documents");
            Arc::new(FixtureFetcher::load(path).map_err(ServiceError::Startup)?)
        }
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Startup(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::Startup(format!("{}: {e}", path.display())))
}

impl App {
    /// Builds the gateway, store and engine. Blocking HTTP clients are made
    /// here, so call this before entering an async runtime.
    pub fn build(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let gateway = Gateway::from_config(config.provider.clone())?;
        let dim = gateway.embedding_dim();
        let store = match &config.server.store_dir {
            Some(dir) => KnowledgeStore::open(dir, dim, config.store.clone()).map_err(ServiceError::StoreLoad)?,
            None => KnowledgeStore::in_memory(dim, config.store.clone()),
        };
        if let Some(seed) = &config.server.seed {
            if store.view().is_empty() {
                let entries: Vec<SeedEntry> = read_json(seed)?;
                let ids = store.import_entries(&gateway, &entries).map_err(ServiceError::StoreLoad)?;
                info!(entries = ids.len(), "seeded empty store");
            }
        }
        let hub = Arc::new(Hub::default());
        let sink = hub.clone();
        let mut engine = Engine::new(gateway, Arc::new(store), config.engine_config())?.with_fetcher(fetcher(&config)?).with_listener(
            Arc::new(move |sid, _, effect| {
                if let Some(ev) = StreamEvent::from_effect(effect) {
                    sink.publish(sid, ev);
                }
            }),
        );
        if let Some(path) = &config.server.audit_log {
            engine = engine.with_audit_file(path).map_err(|e| ServiceError::Startup(format!("{}: {e}", path.display())))?;
        }
        let state_path = config.server.store_dir.as_ref().map(|d| d.join(STATE_FILE));
        if let Some(path) = state_path.as_ref().filter(|p| p.exists()) {
            let state: EngineState = read_json(path)?;
            info!(sessions = state.sessions.len(), "restored session state");
            engine.import_state(state)?;
        }
        Ok(Self { engine: Arc::new(engine), hub, config, state_path, next_id: AtomicU64::new(1) })
    }

    /// Fresh id with `prefix`, unique within this process.
    pub fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.next_id.fetch_add(1, Ordering::SeqCst))
    }

    /// Snapshots the store and writes session state next to it.
    pub fn persist(&self) -> Result<(), ServiceError> {
        let Some(path) = &self.state_path else {
            return Ok(());
        };
        self.engine.store().persist().map_err(ServiceError::StoreLoad)?;
        let body = serde_json::to_vec_pretty(&self.engine.export_state()).expect("engine state serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body).and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| {
            warn!(error = %e, "session state write failed");
            ServiceError::Startup(format!("{}: {e}", path.display()))
        })?;
        info!(path = %path.display(), "persisted store and session state");
        Ok(())
    }
}
