//! Event-driven session orchestration.
//!
//! Every event carries a global sequence number. Events for one session are
//! strictly serialized behind that session's mutex and must arrive with a
//! seq above the session's cursor; different sessions run in parallel and
//! share only the knowledge store, whose writer is already serialized.
//!
//! A customer message inside the action cycle runs classify, rewrite,
//! retrieve, rerank, generate and dedup in one pass. Customer messages that
//! carry `at_ms` are batched while they keep arriving within the quiet
//! window; the batch is flushed by the next non-batching event for the
//! session or by a [`SessionEvent::Tick`] past the window.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::answer::{
    generate_answer, rerank_candidates, retrieve_multipath, rewrite_text, run_diagnostic_tools, strip_markers, GenerationOutcome,
    ToolFailure, ToolRegistry,
};
use crate::dedup::check_duplicate;
use crate::domain::{
    validate_session_id, AnswerCard, AuthorRole, CardId, CardStatus, Citation, DedupConfig, EntryId, Message, MessageId, QuestionOutcome,
    ScopeClass, Session, SessionId, SessionState, TrackedQuestion,
};
use crate::error::{EngineError, StoreError};
use crate::fetch::{DocumentFetcher, NoFetch};
use crate::gateway::Gateway;
use crate::improve::{harvest_links, on_card_accepted, run_session_review, ReviewOptions, ReviewSummary};
use crate::kb::{KnowledgeStore, MutationRecord};
use crate::scope::{classify_batch, ScopeVerdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub dedup: DedupConfig,
    /// Customer messages closer together than this (in `at_ms`) form one batch.
    pub quiet_window_ms: u64,
    pub k_per_path: usize,
    pub context_cap: usize,
    /// Learn from accepts and run closure review.
    pub self_improve: bool,
    pub review: ReviewOptions,
    /// Also harvest links as they are posted, not only at closure.
    pub mid_session_harvest: bool,
    /// Close sessions idle for this long, judged on `Tick` time.
    pub inactivity_close_ms: Option<u64>,
    /// Run closure review inside the close event instead of queueing it.
    pub review_inline: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dedup: DedupConfig::default(),
            quiet_window_ms: 3000,
            k_per_path: 5,
            context_cap: 6,
            self_improve: true,
            review: ReviewOptions::default(),
            mid_session_harvest: false,
            inactivity_close_ms: None,
            review_inline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionOpened {
        session_id: SessionId,
    },
    MessagePosted {
        message: Message,
    },
    SessionClosed {
        session_id: SessionId,
    },
    CardAccepted {
        card_id: CardId,
    },
    /// Clock advance: flushes expired batches and applies inactivity close.
    Tick {
        at_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

/// What a client renders for an emitted card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardView {
    pub id: CardId,
    pub session_id: SessionId,
    pub trigger_message_id: MessageId,
    pub rewritten_question: String,
    pub answer_text: String,
    pub citations: Vec<Citation>,
    pub status: CardStatus,
    /// Transcript seq of the agent message carrying the card.
    pub seq: Option<u64>,
    pub accept_action: String,
}

impl From<&AnswerCard> for CardView {
    fn from(c: &AnswerCard) -> Self {
        Self {
            id: c.id.clone(),
            session_id: c.session_id.clone(),
            trigger_message_id: c.trigger_message_id.clone(),
            rewritten_question: c.rewritten_question.clone(),
            answer_text: c.answer_text.clone(),
            citations: c.citations.clone(),
            status: c.status,
            seq: c.sent_seq,
            accept_action: format!("/cards/{}/accept", c.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    SessionOpened { session_id: SessionId },
    Message { message: Message },
    Verdict { verdict: ScopeVerdict },
    Card { card: CardView },
    Suppressed { card_id: CardId, duplicate_of: Option<CardId>, similarity: f64 },
    Refused { message_id: MessageId, reason: String },
    Accepted { card_id: CardId, entry_id: Option<EntryId> },
    Closed { session_id: SessionId },
    Review { summary: ReviewSummary },
}

impl Effect {
    /// Whether a session stream subscriber sees this effect.
    pub fn is_public(&self) -> bool {
        matches!(self, Self::Message { .. } | Self::Card { .. } | Self::Accepted { .. } | Self::Closed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub seq: u64,
    pub session_id: Option<SessionId>,
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditEntry {
    Verdict { verdict: ScopeVerdict },
    CardSent { card_id: CardId, trigger_message_id: MessageId, citations: Vec<EntryId>, max_similarity: f64 },
    CardSuppressed { card_id: CardId, trigger_message_id: MessageId, duplicate_of: Option<CardId>, max_similarity: f64 },
    Refusal { message_id: MessageId, reason: String },
    ToolFailure { failure: ToolFailure },
    Accepted { card_id: CardId, entry_id: Option<EntryId> },
    Closed,
    Review { summary: ReviewSummary },
    Mutation { record: MutationRecord },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: u64,
    pub event_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(flatten)]
    pub entry: AuditEntry,
}

struct AuditLog {
    records: Vec<AuditRecord>,
    /// Store version up to which mutations have been audited.
    mutations_seen: u64,
    sink: Option<File>,
}

impl AuditLog {
    fn push(&mut self, event_seq: u64, session_id: Option<&SessionId>, entry: AuditEntry) {
        let rec = AuditRecord { index: self.records.len() as u64, event_seq, session_id: session_id.cloned(), entry };
        if let Some(f) = &mut self.sink {
            let line = serde_json::to_string(&rec).expect("audit records serialize");
            if let Err(e) = writeln!(f, "{line}") {
                warn!(error = %e, "audit sink write failed");
            }
        }
        self.records.push(rec);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub events: u64,
    pub stale_events: u64,
    pub messages: u64,
    pub verdicts: BTreeMap<String, u64>,
    pub pipeline_runs: u64,
    pub cards_sent: u64,
    pub cards_suppressed: u64,
    pub refusals: u64,
    pub accepts: u64,
    pub sessions_opened: u64,
    pub sessions_closed: u64,
    pub reviews: u64,
    pub review_mutations: u64,
    pub tool_failures: u64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_max_ms: f64,
}

#[derive(Default)]
struct MetricsState {
    m: EngineMetrics,
    latencies_ms: Vec<f64>,
}

/// Nearest-rank percentile of `values`; 0 when empty.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Persisted per-session state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: Session,
    /// Seq of the last event applied to this session.
    pub cursor: u64,
    /// Transcript seqs of customer messages awaiting classification.
    #[serde(default)]
    pub pending: Vec<u64>,
    #[serde(default)]
    pub pending_last_at_ms: Option<u64>,
    #[serde(default)]
    pub last_at_ms: Option<u64>,
    pub next_card: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewSummary>,
}

impl SessionRecord {
    fn new(session: Session, cursor: u64) -> Self {
        Self { session, cursor, pending: Vec::new(), pending_last_at_ms: None, last_at_ms: None, next_card: 1, review: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub seq: u64,
    pub sessions: Vec<SessionRecord>,
    #[serde(default)]
    pub pending_reviews: Vec<SessionId>,
}

pub type EffectListener = Arc<dyn Fn(&SessionId, u64, &Effect) + Send + Sync>;

type Slot = Arc<Mutex<SessionRecord>>;

pub struct Engine {
    gateway: Gateway,
    store: Arc<KnowledgeStore>,
    fetcher: Arc<dyn DocumentFetcher>,
    tools: ToolRegistry,
    config: EngineConfig,
    sessions: RwLock<HashMap<SessionId, Slot>>,
    cards: RwLock<HashMap<CardId, SessionId>>,
    seq: AtomicU64,
    audit: Mutex<AuditLog>,
    metrics: Mutex<MetricsState>,
    reviews: Mutex<VecDeque<SessionId>>,
    listener: Option<EffectListener>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("sessions", &self.sessions.read().len())
            .field("seq", &self.seq.load(Ordering::SeqCst))
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(gateway: Gateway, store: Arc<KnowledgeStore>, config: EngineConfig) -> Result<Self, EngineError> {
        config.dedup.validate()?;
        if store.embedding_dim() != gateway.embedding_dim() {
            return Err(StoreError::DimensionMismatch { store: store.embedding_dim(), gateway: gateway.embedding_dim() }.into());
        }
        let seen = store.version();
        Ok(Self {
            gateway,
            store,
            fetcher: Arc::new(NoFetch),
            tools: ToolRegistry::new(),
            config,
            sessions: RwLock::new(HashMap::new()),
            cards: RwLock::new(HashMap::new()),
            seq: AtomicU64::new(0),
            audit: Mutex::new(AuditLog { records: Vec::new(), mutations_seen: seen, sink: None }),
            metrics: Mutex::new(MetricsState::default()),
            reviews: Mutex::new(VecDeque::new()),
            listener: None,
        })
    }

    pub fn with_fetcher(mut self, fetcher: Arc<dyn DocumentFetcher>) -> Self {
        self.fetcher = fetcher;
        self
    }

    pub fn with_tools(mut self, tools: ToolRegistry) -> Self {
        self.tools = tools;
        self
    }

    /// Called for every effect, in order, while the session is locked.
    pub fn with_listener(mut self, listener: EffectListener) -> Self {
        self.listener = Some(listener);
        self
    }

    /// Mirrors every audit record to `path` as JSON lines (appending).
    pub fn with_audit_file(self, path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.audit.lock().sink = Some(f);
        Ok(self)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &Arc<KnowledgeStore> {
        &self.store
    }

    pub fn last_seq(&self) -> u64 {
        self.seq.load(Ordering::SeqCst)
    }

    fn slot(&self, id: &SessionId) -> Result<Slot, EngineError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| EngineError::UnknownSession(id.clone()))
    }

    fn event_session(&self, ev: &SessionEvent) -> Result<Option<SessionId>, EngineError> {
        Ok(match ev {
            SessionEvent::SessionOpened { session_id } | SessionEvent::SessionClosed { session_id } => Some(session_id.clone()),
            SessionEvent::MessagePosted { message } => Some(message.session_id.clone()),
            SessionEvent::CardAccepted { card_id } => {
                Some(self.cards.read().get(card_id).cloned().ok_or_else(|| EngineError::UnknownCard(card_id.clone()))?)
            }
            SessionEvent::Tick { .. } => None,
        })
    }

    /// Assigns the next global seq and applies the event. The seq is taken
    /// while the session is locked, so per-session order equals seq order.
    pub fn submit(&self, event: SessionEvent) -> Result<EventOutcome, EngineError> {
        self.apply(None, event)
    }

    /// Applies an event with a caller-provided seq (replay). Events at or
    /// below the session cursor are rejected as stale and change nothing.
    pub fn handle_event(&self, ev: SequencedEvent) -> Result<EventOutcome, EngineError> {
        self.apply(Some(ev.seq), ev.event)
    }

    fn apply(&self, given: Option<u64>, event: SessionEvent) -> Result<EventOutcome, EngineError> {
        self.metrics.lock().m.events += 1;
        let take_seq = || match given {
            Some(s) => {
                self.seq.fetch_max(s, Ordering::SeqCst);
                s
            }
            None => self.seq.fetch_add(1, Ordering::SeqCst) + 1,
        };
        let sid = self.event_session(&event)?;
        let outcome = match (event, sid) {
            (SessionEvent::SessionOpened { session_id }, _) => {
                validate_session_id(session_id.as_str())?;
                let mut map = self.sessions.write();
                if map.contains_key(&session_id) {
                    return Err(EngineError::SessionExists(session_id));
                }
                let seq = take_seq();
                map.insert(session_id.clone(), Arc::new(Mutex::new(SessionRecord::new(Session::new(session_id.clone()), seq))));
                self.metrics.lock().m.sessions_opened += 1;
                let effects = vec![Effect::SessionOpened { session_id: session_id.clone() }];
                self.notify(&session_id, seq, &effects);
                EventOutcome { seq, session_id: Some(session_id), effects }
            }
            (SessionEvent::Tick { at_ms }, _) => {
                let seq = take_seq();
                let mut effects = Vec::new();
                let slots: Vec<(SessionId, Slot)> = {
                    let mut v: Vec<_> = self.sessions.read().iter().map(|(k, s)| (k.clone(), s.clone())).collect();
                    v.sort_by(|a, b| a.0.cmp(&b.0));
                    v
                };
                for (id, slot) in slots {
                    let mut rec = slot.lock();
                    let mut local = Vec::new();
                    self.on_tick(&mut rec, seq, at_ms, &mut local);
                    self.notify(&id, seq, &local);
                    effects.extend(local);
                }
                EventOutcome { seq, session_id: None, effects }
            }
            (event, Some(id)) => {
                let slot = self.slot(&id)?;
                let mut rec = slot.lock();
                let seq = given.unwrap_or(0);
                if given.is_some() && seq <= rec.cursor {
                    self.metrics.lock().m.stale_events += 1;
                    debug!(session = %id, seq, cursor = rec.cursor, "stale event dropped");
                    return Err(EngineError::StaleEvent { seq, cursor: rec.cursor });
                }
                let seq = take_seq();
                let mut effects = Vec::new();
                let result = self.on_session_event(&mut rec, seq, event, &mut effects);
                rec.cursor = seq;
                self.audit_mutations(seq, Some(&id));
                self.notify(&id, seq, &effects);
                result?;
                EventOutcome { seq, session_id: Some(id), effects }
            }
            (_, None) => unreachable!("only ticks have no session"),
        };
        Ok(outcome)
    }

    fn notify(&self, id: &SessionId, seq: u64, effects: &[Effect]) {
        if let Some(l) = &self.listener {
            for e in effects {
                l(id, seq, e);
            }
        }
    }

    fn audit_push(&self, event_seq: u64, session_id: Option<&SessionId>, entry: AuditEntry) {
        self.audit.lock().push(event_seq, session_id, entry);
    }

    /// Audits store mutations not yet seen, each exactly once.
    fn audit_mutations(&self, event_seq: u64, session_id: Option<&SessionId>) {
        let mut audit = self.audit.lock();
        let fresh = self.store.records_since(audit.mutations_seen);
        for record in fresh {
            audit.mutations_seen = audit.mutations_seen.max(record.version);
            audit.push(event_seq, session_id, AuditEntry::Mutation { record });
        }
    }

    fn on_session_event(
        &self,
        rec: &mut SessionRecord,
        seq: u64,
        event: SessionEvent,
        effects: &mut Vec<Effect>,
    ) -> Result<(), EngineError> {
        match event {
            SessionEvent::MessagePosted { message } => self.on_message(rec, seq, message, effects),
            SessionEvent::SessionClosed { .. } => {
                self.flush(rec, seq, effects);
                self.close(rec, seq, effects)
            }
            SessionEvent::CardAccepted { card_id } => {
                self.flush(rec, seq, effects);
                self.accept(rec, seq, &card_id, effects)
            }
            SessionEvent::SessionOpened { .. } | SessionEvent::Tick { .. } => unreachable!("handled by apply"),
        }
    }

    fn on_message(&self, rec: &mut SessionRecord, seq: u64, message: Message, effects: &mut Vec<Effect>) -> Result<(), EngineError> {
        if rec.session.state == SessionState::Closed {
            return Err(crate::error::DomainError::SessionClosed(rec.session.id.clone()).into());
        }
        let batching = self.config.quiet_window_ms > 0 && message.at_ms.is_some();
        let is_candidate = message.author == AuthorRole::Customer && rec.session.is_active();
        if is_candidate && batching {
            let at = message.at_ms.expect("batching implies at_ms");
            let continues = rec.pending_last_at_ms.is_some_and(|last| at.saturating_sub(last) <= self.config.quiet_window_ms);
            if !continues {
                self.flush(rec, seq, effects);
            }
        } else {
            self.flush(rec, seq, effects);
        }
        let msg = rec.session.append_message(message)?.clone();
        if msg.at_ms.is_some() {
            rec.last_at_ms = msg.at_ms;
        }
        self.metrics.lock().m.messages += 1;
        effects.push(Effect::Message { message: msg.clone() });
        if self.config.mid_session_harvest && msg.author != AuthorRole::Agent && !msg.links.is_empty() {
            harvest_links(&rec.session.id, std::slice::from_ref(&msg), self.fetcher.as_ref(), &self.store, &self.gateway);
        }
        let in_window = rec.session.analyst_joined_seq.is_some_and(|j| msg.seq >= j);
        if msg.author == AuthorRole::Customer && rec.session.is_active() && in_window {
            rec.pending.push(msg.seq);
            if batching {
                rec.pending_last_at_ms = msg.at_ms;
            } else {
                self.flush(rec, seq, effects);
            }
        }
        Ok(())
    }

    fn on_tick(&self, rec: &mut SessionRecord, seq: u64, at_ms: u64, effects: &mut Vec<Effect>) {
        if rec.pending_last_at_ms.is_some_and(|last| at_ms.saturating_sub(last) > self.config.quiet_window_ms) {
            self.flush(rec, seq, effects);
        }
        if let (Some(limit), Some(last)) = (self.config.inactivity_close_ms, rec.last_at_ms) {
            if rec.session.state != SessionState::Closed && at_ms.saturating_sub(last) > limit {
                self.flush(rec, seq, effects);
                info!(session = %rec.session.id, idle_ms = at_ms - last, "closing idle session");
                if let Err(e) = self.close(rec, seq, effects) {
                    warn!(session = %rec.session.id, error = %e, "idle close failed");
                }
            }
        }
        self.audit_mutations(seq, Some(&rec.session.id));
    }

    /// Classifies and answers the pending batch, if any.
    fn flush(&self, rec: &mut SessionRecord, seq: u64, effects: &mut Vec<Effect>) {
        if rec.pending.is_empty() {
            return;
        }
        let batch = std::mem::take(&mut rec.pending);
        rec.pending_last_at_ms = None;
        self.run_pipeline(rec, seq, &batch, effects);
    }

    fn run_pipeline(&self, rec: &mut SessionRecord, seq: u64, batch: &[u64], effects: &mut Vec<Effect>) {
        let started = Instant::now();
        let sid = rec.session.id.clone();
        let msgs: Vec<Message> = rec.session.messages.iter().filter(|m| batch.contains(&m.seq)).cloned().collect();
        let Some(trigger) = msgs.last().cloned() else {
            return;
        };
        let refs: Vec<&Message> = msgs.iter().collect();
        let class = classify_batch(&rec.session, &refs, &self.gateway);
        let decided = rec.session.last_seq();
        {
            let mut m = self.metrics.lock();
            m.m.pipeline_runs += 1;
            *m.m.verdicts.entry(class.label().to_string()).or_default() += msgs.len() as u64;
        }
        for msg in &msgs {
            let verdict = ScopeVerdict { message_id: msg.id.clone(), scope: class, decided_at_seq: decided };
            rec.session.verdicts.push(verdict.clone());
            self.audit_push(seq, Some(&sid), AuditEntry::Verdict { verdict: verdict.clone() });
            effects.push(Effect::Verdict { verdict });
        }
        if class != ScopeClass::WithinScope {
            self.record_latency(started);
            return;
        }

        let text = msgs.iter().map(|m| m.text.trim()).collect::<Vec<_>>().join("\n");
        let question = rewrite_text(&rec.session, &trigger, &text, &self.gateway);
        let tools = run_diagnostic_tools(&question, &self.tools);
        for failure in tools.failures {
            self.metrics.lock().m.tool_failures += 1;
            self.audit_push(seq, Some(&sid), AuditEntry::ToolFailure { failure });
        }
        let snap = self.store.view();
        let candidates = retrieve_multipath(&question, &snap, &self.gateway, self.config.k_per_path);
        let candidates = rerank_candidates(&question, candidates, &snap, &self.gateway, self.config.context_cap);
        let outcome = generate_answer(&rec.session, &trigger, &question, &candidates, &snap, &tools.contexts, &self.gateway);

        let refuse = |rec: &mut SessionRecord, effects: &mut Vec<Effect>, reason: String| {
            self.metrics.lock().m.refusals += 1;
            rec.session.questions.push(TrackedQuestion {
                trigger_message_id: trigger.id.clone(),
                trigger_seq: trigger.seq,
                question: question.clone(),
                outcome: QuestionOutcome::Refused,
            });
            self.audit_push(seq, Some(&sid), AuditEntry::Refusal { message_id: trigger.id.clone(), reason: reason.clone() });
            effects.push(Effect::Refused { message_id: trigger.id.clone(), reason });
        };

        let (answer, cited) = match outcome {
            GenerationOutcome::Refusal => {
                refuse(rec, effects, "no grounded answer".into());
                self.record_latency(started);
                return;
            }
            GenerationOutcome::Answer { text, citations } => (text, citations),
        };
        // citations must come from the presented candidates
        if let Some(bad) = cited.iter().find(|id| !candidates.iter().any(|c| c.entry_id == **id)) {
            refuse(rec, effects, format!("citation {bad} was not presented"));
            self.record_latency(started);
            return;
        }
        let embedding = match self.gateway.embed(&strip_markers(&answer)) {
            Ok(e) => e,
            Err(e) => {
                refuse(rec, effects, format!("answer embedding failed: {e}"));
                self.record_latency(started);
                return;
            }
        };
        let report = check_duplicate(&embedding, &rec.session.cards, &self.config.dedup);
        let card_id = CardId::new(format!("{}-c{}", sid, rec.next_card));
        rec.next_card += 1;
        let citations = cited.iter().filter_map(|id| snap.get(*id)).map(|e| e.citation()).collect();
        let mut card = AnswerCard {
            id: card_id.clone(),
            session_id: sid.clone(),
            trigger_message_id: trigger.id.clone(),
            rewritten_question: question.text.clone(),
            answer_text: answer,
            citations,
            embedding,
            status: CardStatus::Sent,
            sent_seq: None,
            duplicate_of: None,
        };
        if report.is_duplicate {
            card.status = CardStatus::Suppressed;
            card.duplicate_of = report.nearest_card_id.clone();
            self.metrics.lock().m.cards_suppressed += 1;
            self.audit_push(
                seq,
                Some(&sid),
                AuditEntry::CardSuppressed {
                    card_id: card_id.clone(),
                    trigger_message_id: trigger.id.clone(),
                    duplicate_of: card.duplicate_of.clone(),
                    max_similarity: report.max_similarity,
                },
            );
            effects.push(Effect::Suppressed {
                card_id: card_id.clone(),
                duplicate_of: card.duplicate_of.clone(),
                similarity: report.max_similarity,
            });
        } else {
            let mut agent = Message::new(format!("{card_id}-m"), sid.clone(), AuthorRole::Agent, card.answer_text.clone());
            agent.card_id = Some(card_id.clone());
            agent.links = Vec::new();
            match rec.session.append_message(agent) {
                Ok(m) => card.sent_seq = Some(m.seq),
                Err(e) => {
                    warn!(session = %sid, error = %e, "could not append card message");
                    return;
                }
            }
            self.metrics.lock().m.cards_sent += 1;
            self.audit_push(
                seq,
                Some(&sid),
                AuditEntry::CardSent {
                    card_id: card_id.clone(),
                    trigger_message_id: trigger.id.clone(),
                    citations: cited,
                    max_similarity: report.max_similarity,
                },
            );
            effects.push(Effect::Card { card: CardView::from(&card) });
        }
        self.record_latency(started);
        rec.session.questions.push(TrackedQuestion {
            trigger_message_id: trigger.id.clone(),
            trigger_seq: trigger.seq,
            question,
            outcome: QuestionOutcome::Card(card_id.clone()),
        });
        rec.session.cards.push(card);
        self.cards.write().insert(card_id, sid);
    }

    fn record_latency(&self, started: Instant) {
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        self.metrics.lock().latencies_ms.push(ms);
    }

    fn accept(&self, rec: &mut SessionRecord, seq: u64, card_id: &CardId, effects: &mut Vec<Effect>) -> Result<(), EngineError> {
        let closed = rec.session.state == SessionState::Closed;
        let card = rec.session.card(card_id).ok_or_else(|| EngineError::UnknownCard(card_id.clone()))?.clone();
        let entry_id = match card.status {
            CardStatus::Suppressed => return Err(EngineError::CardNotAcceptable(card_id.clone())),
            CardStatus::Accepted => {
                // repeated click: report the entry from the first accept
                self.store.view().tasks.get(&format!("accept:{card_id}")).and_then(|ids| ids.first().copied())
            }
            CardStatus::Sent if closed => return Err(EngineError::CardNotAcceptable(card_id.clone())),
            CardStatus::Sent => {
                let mut accepted = card.clone();
                accepted.status = CardStatus::Accepted;
                let id = if self.config.self_improve { Some(on_card_accepted(&accepted, &self.store, &self.gateway)?) } else { None };
                rec.session.card_mut(card_id).expect("card exists").status = CardStatus::Accepted;
                self.metrics.lock().m.accepts += 1;
                self.audit_push(seq, Some(&rec.session.id), AuditEntry::Accepted { card_id: card_id.clone(), entry_id: id });
                id
            }
        };
        effects.push(Effect::Accepted { card_id: card_id.clone(), entry_id });
        Ok(())
    }

    fn close(&self, rec: &mut SessionRecord, seq: u64, effects: &mut Vec<Effect>) -> Result<(), EngineError> {
        rec.session.close()?;
        let sid = rec.session.id.clone();
        self.metrics.lock().m.sessions_closed += 1;
        self.audit_push(seq, Some(&sid), AuditEntry::Closed);
        effects.push(Effect::Closed { session_id: sid.clone() });
        if !self.config.self_improve {
            return Ok(());
        }
        if self.config.review_inline {
            let summary = self.review(&rec.session);
            self.audit_mutations(seq, Some(&sid));
            self.audit_push(seq, Some(&sid), AuditEntry::Review { summary: summary.clone() });
            rec.review = Some(summary.clone());
            effects.push(Effect::Review { summary });
        } else {
            self.reviews.lock().push_back(sid);
        }
        Ok(())
    }

    fn review(&self, session: &Session) -> ReviewSummary {
        let summary = run_session_review(session, &self.gateway, &self.store, self.fetcher.as_ref(), self.config.review);
        let mut m = self.metrics.lock();
        m.m.reviews += 1;
        m.m.review_mutations += summary.mutations() as u64;
        summary
    }

    pub fn pending_reviews(&self) -> Vec<SessionId> {
        self.reviews.lock().iter().cloned().collect()
    }

    /// Runs one queued closure review, without holding the session lock
    /// during model calls. Returns `None` when the queue is empty.
    pub fn run_next_review(&self) -> Option<ReviewSummary> {
        let sid = self.reviews.lock().pop_front()?;
        let slot = self.slot(&sid).ok()?;
        let session = slot.lock().session.clone();
        let summary = self.review(&session);
        let seq = self.last_seq();
        self.audit_mutations(seq, Some(&sid));
        self.audit_push(seq, Some(&sid), AuditEntry::Review { summary: summary.clone() });
        slot.lock().review = Some(summary.clone());
        self.notify(&sid, seq, &[Effect::Review { summary: summary.clone() }]);
        Some(summary)
    }

    pub fn run_pending_reviews(&self) -> Vec<ReviewSummary> {
        std::iter::from_fn(|| self.run_next_review()).collect()
    }

    pub fn session(&self, id: &SessionId) -> Option<Session> {
        self.sessions.read().get(id).map(|s| s.lock().session.clone())
    }

    pub fn session_record(&self, id: &SessionId) -> Option<SessionRecord> {
        self.sessions.read().get(id).map(|s| s.lock().clone())
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        let mut ids: Vec<SessionId> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn card(&self, id: &CardId) -> Option<AnswerCard> {
        let sid = self.cards.read().get(id).cloned()?;
        self.session(&sid)?.card(id).cloned()
    }

    pub fn metrics(&self) -> EngineMetrics {
        let s = self.metrics.lock();
        let mut m = s.m.clone();
        m.latency_p50_ms = percentile(&s.latencies_ms, 50.0);
        m.latency_p99_ms = percentile(&s.latencies_ms, 99.0);
        m.latency_max_ms = s.latencies_ms.iter().copied().fold(0.0, f64::max);
        m
    }

    /// Classify-to-emit wall time of every pipeline run, in run order.
    pub fn latencies_ms(&self) -> Vec<f64> {
        self.metrics.lock().latencies_ms.clone()
    }

    pub fn audit(&self) -> Vec<AuditRecord> {
        self.audit.lock().records.clone()
    }

    pub fn audit_jsonl(&self) -> String {
        self.audit.lock().records.iter().map(|r| serde_json::to_string(r).expect("audit records serialize") + "\n").collect()
    }

    pub fn export_state(&self) -> EngineState {
        let mut sessions: Vec<SessionRecord> = self.sessions.read().values().map(|s| s.lock().clone()).collect();
        sessions.sort_by(|a, b| a.session.id.cmp(&b.session.id));
        EngineState { seq: self.last_seq(), sessions, pending_reviews: self.pending_reviews() }
    }

    /// Replaces all session state. Cursors come with it, so events already
    /// applied before the export are rejected as stale afterwards.
    pub fn import_state(&self, state: EngineState) -> Result<(), EngineError> {
        let mut map = HashMap::new();
        let mut cards = HashMap::new();
        for rec in state.sessions {
            rec.session.validate()?;
            for c in &rec.session.cards {
                cards.insert(c.id.clone(), rec.session.id.clone());
            }
            map.insert(rec.session.id.clone(), Arc::new(Mutex::new(rec)));
        }
        *self.sessions.write() = map;
        *self.cards.write() = cards;
        *self.reviews.lock() = state.pending_reviews.into();
        self.seq.fetch_max(state.seq, Ordering::SeqCst);
        Ok(())
    }
}

/// Serializes every session's transcript (messages and cards, embeddings
/// dropped) in session id order; used to compare runs byte for byte.
pub fn transcript_json(engine: &Engine) -> String {
    #[derive(Serialize)]
    struct View<'a> {
        session_id: &'a SessionId,
        state: SessionState,
        messages: &'a [Message],
        cards: Vec<CardView>,
        verdicts: &'a [ScopeVerdict],
    }
    let sessions: Vec<Session> = engine.session_ids().iter().filter_map(|id| engine.session(id)).collect();
    let views: Vec<View> = sessions
        .iter()
        .map(|s| View {
            session_id: &s.id,
            state: s.state,
            messages: &s.messages,
            cards: s.cards.iter().map(CardView::from).collect(),
            verdicts: &s.verdicts,
        })
        .collect();
    serde_json::to_string(&views).expect("transcripts serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EntryStatus, Provenance};
    use crate::gateway::ScriptRules;
    use crate::kb::{MutationCause, StoreConfig};

    const DIM: usize = 256;

    fn engine(config: EngineConfig) -> Engine {
        let gw = Gateway::scripted(ScriptRules::builtin(), DIM);
        let store = Arc::new(KnowledgeStore::in_memory(DIM, StoreConfig::default()));
        store
            .insert_qa(
                &gw,
                "How do I set a lifecycle rule on my storage bucket?",
                "Open the bucket, choose Lifecycle, and add a rule with a prefix and an expiry.",
                Provenance::ManualSeed,
                EntryStatus::Validated,
                MutationCause::ManualSeed,
                None,
            )
            .unwrap();
        Engine::new(gw, store, config).unwrap()
    }

    fn post(e: &Engine, sid: &str, id: &str, role: AuthorRole, text: &str) -> EventOutcome {
        e.submit(SessionEvent::MessagePosted { message: Message::new(id, SessionId::from(sid), role, text) }).unwrap()
    }

    fn open(e: &Engine, sid: &str) {
        e.submit(SessionEvent::SessionOpened { session_id: SessionId::from(sid) }).unwrap();
    }

    fn cards(o: &EventOutcome) -> Vec<&CardView> {
        o.effects.iter().filter_map(|e| if let Effect::Card { card } = e { Some(card) } else { None }).collect()
    }

    const Q: &str = "How do I set a lifecycle rule on my storage bucket?";

    #[test]
    fn no_action_before_analyst() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        let o = post(&e, "s", "m1", AuthorRole::Customer, Q);
        assert!(cards(&o).is_empty());
        assert!(e.session(&SessionId::from("s")).unwrap().verdicts.is_empty());
    }

    #[test]
    fn within_scope_question_gets_card() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi, I'm here to help.");
        let o = post(&e, "s", "m2", AuthorRole::Customer, Q);
        let c = cards(&o);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].id, CardId::from("s-c1"));
        assert_eq!(c[0].citations.len(), 1);
        let s = e.session(&SessionId::from("s")).unwrap();
        assert_eq!(s.messages.last().unwrap().card_id, Some(CardId::from("s-c1")));
        assert_eq!(s.verdicts.len(), 1);
    }

    #[test]
    fn empty_store_refuses_and_extracts_at_close() {
        let gw = Gateway::scripted(ScriptRules::builtin(), DIM);
        let store = Arc::new(KnowledgeStore::in_memory(DIM, StoreConfig::default()));
        let e = Engine::new(gw, store, EngineConfig::default()).unwrap();
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        let o = post(&e, "s", "m2", AuthorRole::Customer, Q);
        assert!(matches!(o.effects.last(), Some(Effect::Refused { .. })));
        let o = e.submit(SessionEvent::SessionClosed { session_id: SessionId::from("s") }).unwrap();
        let Some(Effect::Review { summary }) = o.effects.last() else { panic!("{o:?}") };
        assert_eq!(summary.count(crate::improve::ReviewPath::Extraction), 1);
    }

    #[test]
    fn repeat_is_suppressed() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        post(&e, "s", "m2", AuthorRole::Customer, Q);
        let before = e.session(&SessionId::from("s")).unwrap().messages.len();
        let o = post(&e, "s", "m3", AuthorRole::Customer, "how do I set a lifecycle rule on the storage bucket?");
        assert!(o.effects.iter().any(|e| matches!(e, Effect::Suppressed { .. })));
        let s = e.session(&SessionId::from("s")).unwrap();
        assert_eq!(s.messages.len(), before + 1);
        assert_eq!(s.cards[1].duplicate_of, Some(CardId::from("s-c1")));
    }

    #[test]
    fn accept_paths() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        post(&e, "s", "m2", AuthorRole::Customer, Q);
        let id = CardId::from("s-c1");
        let first = e.submit(SessionEvent::CardAccepted { card_id: id.clone() }).unwrap();
        let second = e.submit(SessionEvent::CardAccepted { card_id: id.clone() }).unwrap();
        assert_eq!(first.effects, second.effects);
        assert_eq!(e.store().view().len(), 2);
        assert!(matches!(e.submit(SessionEvent::CardAccepted { card_id: CardId::from("nope") }), Err(EngineError::UnknownCard(_))));
    }

    #[test]
    fn stale_and_unknown() {
        let e = engine(EngineConfig::default());
        let sid = SessionId::from("s");
        e.handle_event(SequencedEvent { seq: 5, event: SessionEvent::SessionOpened { session_id: sid.clone() } }).unwrap();
        let msg = Message::new("m1", sid.clone(), AuthorRole::Customer, "hi");
        let stale = e.handle_event(SequencedEvent { seq: 5, event: SessionEvent::MessagePosted { message: msg.clone() } });
        assert!(matches!(stale, Err(EngineError::StaleEvent { seq: 5, cursor: 5 })));
        e.handle_event(SequencedEvent { seq: 6, event: SessionEvent::MessagePosted { message: msg } }).unwrap();
        let other = Message::new("m1", SessionId::from("zz"), AuthorRole::Customer, "hi");
        assert!(matches!(e.submit(SessionEvent::MessagePosted { message: other }), Err(EngineError::UnknownSession(_))));
        assert_eq!(e.submit(SessionEvent::Tick { at_ms: 0 }).unwrap().seq, 7);
    }

    #[test]
    fn quiet_window_batches() {
        let e = engine(EngineConfig::default());
        let sid = SessionId::from("s");
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        let part = |id: &str, text: &str, at: u64| {
            e.submit(SessionEvent::MessagePosted { message: Message::new(id, sid.clone(), AuthorRole::Customer, text).at(at) }).unwrap()
        };
        assert!(cards(&part("m2", "How do I set a lifecycle rule", 1000)).is_empty());
        assert!(cards(&part("m3", "on my storage bucket?", 2500)).is_empty());
        let o = e.submit(SessionEvent::Tick { at_ms: 5000 }).unwrap();
        assert!(cards(&o).is_empty());
        let o = e.submit(SessionEvent::Tick { at_ms: 5501 }).unwrap();
        assert_eq!(cards(&o).len(), 1);
        assert_eq!(cards(&o)[0].trigger_message_id, MessageId::from("m3"));
        assert_eq!(e.session(&sid).unwrap().verdicts.len(), 2);
    }

    #[test]
    fn audit_covers_everything_once() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        post(&e, "s", "m2", AuthorRole::Customer, Q);
        post(&e, "s", "m3", AuthorRole::Customer, "thanks");
        e.submit(SessionEvent::CardAccepted { card_id: CardId::from("s-c1") }).unwrap();
        e.submit(SessionEvent::SessionClosed { session_id: SessionId::from("s") }).unwrap();
        let audit = e.audit();
        let count = |f: fn(&AuditEntry) -> bool| audit.iter().filter(|r| f(&r.entry)).count();
        assert_eq!(count(|a| matches!(a, AuditEntry::Verdict { .. })), 2);
        assert_eq!(count(|a| matches!(a, AuditEntry::CardSent { .. })), 1);
        assert_eq!(count(|a| matches!(a, AuditEntry::Mutation { .. })), e.store().records().len() - 1);
        assert!(e.audit_jsonl().lines().all(|l| serde_json::from_str::<AuditRecord>(l).is_ok()));
        let m = e.metrics();
        assert_eq!((m.cards_sent, m.accepts, m.sessions_closed), (1, 1, 1));
    }

    #[test]
    fn state_roundtrip() {
        let e = engine(EngineConfig::default());
        open(&e, "s");
        post(&e, "s", "m1", AuthorRole::Analyst, "Hi.");
        post(&e, "s", "m2", AuthorRole::Customer, Q);
        let state = e.export_state();
        let json = serde_json::to_string(&state).unwrap();
        let f = engine(EngineConfig::default());
        f.import_state(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(transcript_json(&e), transcript_json(&f));
        assert!(f.card(&CardId::from("s-c1")).is_some());
        assert_eq!(f.submit(SessionEvent::Tick { at_ms: 0 }).unwrap().seq, state.seq + 1);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&[], 99.0), 0.0);
    }
}
