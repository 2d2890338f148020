//! Learning from sessions: accepted cards, reviews of unaccepted cards,
//! extraction from questions the agent could not answer, and shared links.
//!
//! Every mutating task carries an idempotency key (`accept:…`, `review:…`,
//! `extract:…`, `harvest:…`) recorded in the store's log, so rerunning a
//! review after a crash never applies a task twice. Model failures only ever
//! lead to Keep or no mutation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::answer::{reference_text, strip_markers, RewrittenQuestion};
use crate::domain::{
    AnswerCard, AuthorRole, CardStatus, EntryId, EntryKind, EntryStatus, KnowledgeEntry, Message, MessageId, Provenance, QuestionOutcome,
    ReviewDecision, Session, SessionId,
};
use crate::error::{DomainError, StoreError};
use crate::fetch::DocumentFetcher;
use crate::gateway::{FieldKind, Gateway, ResponseSchema, StructuredRequest, Turn};
use crate::kb::{KnowledgeStore, MutationCause, PendingOp, StoreSnapshot};
use crate::prompts::PromptId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub card: AnswerCard,
    pub question: RewrittenQuestion,
    pub references_used: Vec<EntryId>,
    /// Everything after the card was sent.
    pub follow_up: Vec<Message>,
}

impl ReviewTask {
    /// `None` unless the card was sent and not accepted.
    pub fn build(session: &Session, card: &AnswerCard, question: &RewrittenQuestion) -> Option<Self> {
        if card.status != CardStatus::Sent {
            return None;
        }
        let sent = card.sent_seq?;
        Some(Self {
            card: card.clone(),
            question: question.clone(),
            references_used: card.citation_ids(),
            follow_up: session.messages_after(sent).to_vec(),
        })
    }

    pub fn key(&self) -> String {
        format!("review:{}:{}", self.card.session_id, self.card.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionTask {
    pub session_id: SessionId,
    pub question: RewrittenQuestion,
    /// Everything after the trigger message.
    pub follow_up: Vec<Message>,
}

impl ExtractionTask {
    pub fn build(session: &Session, trigger_seq: u64, question: &RewrittenQuestion) -> Self {
        Self { session_id: session.id.clone(), question: question.clone(), follow_up: session.messages_after(trigger_seq).to_vec() }
    }

    pub fn key(&self) -> String {
        format!("extract:{}:{}", self.session_id, self.question.original_message_id)
    }
}

/// Stores an accepted card as a validated QA pair and validates the
/// provisional entries it cited, in one transaction. Idempotent per card.
pub fn on_card_accepted(card: &AnswerCard, store: &KnowledgeStore, gateway: &Gateway) -> Result<EntryId, StoreError> {
    if card.status == CardStatus::Suppressed {
        return Err(StoreError::InvalidEntry(DomainError::Invalid(format!("card {} was never sent", card.id))));
    }
    let task = format!("accept:{}", card.id);
    let snap = store.view();
    if let Some(id) = snap.tasks.get(&task).and_then(|ids| ids.first()) {
        return Ok(*id);
    }
    let content = strip_markers(&card.answer_text);
    let embedding = gateway.embed(&card.rewritten_question)?;
    let mut ops = vec![PendingOp::Insert {
        kind: EntryKind::QAPair,
        question: card.rewritten_question.trim().to_string(),
        content,
        source: Provenance::Session(card.session_id.clone()),
        status: EntryStatus::Validated,
        embedding,
    }];
    for id in card.citation_ids() {
        if snap.get(id).is_some_and(|e| e.status == EntryStatus::Provisional) {
            ops.push(PendingOp::Validate(id));
        }
    }
    let commit = store.commit(Some(&task), MutationCause::AcceptedCard { card_id: card.id.clone() }, ops)?;
    commit.entry_ids.first().copied().ok_or(StoreError::EmptyDocument)
}

pub fn review_schema() -> ResponseSchema {
    ResponseSchema::new("review")
        .required("action", FieldKind::Enum(vec!["Keep".into(), "Delete".into(), "Update".into()]))
        .optional("references", FieldKind::IntegerList)
        .optional("question", FieldKind::String)
        .optional("answer", FieldKind::String)
}

fn references_block(entries: &[&KnowledgeEntry]) -> String {
    entries.iter().enumerate().map(|(i, e)| format!("<doc_{n}>{}</doc_{n}>", reference_text(e), n = i + 1)).collect::<Vec<_>>().join("\n")
}

/// Asks the reviewer for Keep, Delete or Update. Anything malformed, and
/// every model failure, is Keep.
pub fn review_unaccepted(task: &ReviewTask, store: &StoreSnapshot, gateway: &Gateway) -> ReviewDecision {
    let refs: Vec<&KnowledgeEntry> = task.references_used.iter().filter_map(|id| store.get(*id)).collect();
    if refs.is_empty() {
        return ReviewDecision::Keep;
    }
    let mut dialogue: Vec<Turn> = task.follow_up.iter().map(Turn::from_message).collect();
    dialogue.push(Turn::instruction(format!(
        "# Question (Q)\n{}\n# Answer (A)\n{}\n# References\n{}",
        task.question.text,
        task.card.answer_text,
        references_block(&refs)
    )));
    let req = StructuredRequest { system_prompt: gateway.prompt(PromptId::Review), dialogue, response_schema: review_schema() };
    let reply = match gateway.complete_structured(&req) {
        Ok(r) => r,
        Err(e) => {
            warn!(card = %task.card.id, error = %e, "review failed, keeping");
            return ReviewDecision::Keep;
        }
    };
    let numbers: Vec<u64> = reply["references"].as_array().into_iter().flatten().filter_map(Value::as_u64).collect();
    let mut picked = Vec::new();
    for n in &numbers {
        match (*n as usize).checked_sub(1).and_then(|i| refs.get(i)) {
            Some(e) if !picked.contains(&e.id) => picked.push(e.id),
            Some(_) => {}
            None => {
                warn!(card = %task.card.id, doc = n, "review names an unknown reference, keeping");
                return ReviewDecision::Keep;
            }
        }
    }
    match reply["action"].as_str() {
        Some("Delete") => {
            let entry_ids = if picked.is_empty() { refs.iter().map(|e| e.id).collect() } else { picked };
            ReviewDecision::Delete { entry_ids }
        }
        Some("Update") => {
            let target = picked.first().copied().unwrap_or(refs[0].id);
            let q = reply["question"].as_str().unwrap_or("").trim();
            let a = reply["answer"].as_str().unwrap_or("").trim();
            if q.is_empty() || a.is_empty() {
                warn!(card = %task.card.id, "update without question and answer, keeping");
                return ReviewDecision::Keep;
            }
            ReviewDecision::Update { entry_id: target, new_question: q.to_string(), new_content: strip_markers(a) }
        }
        _ => ReviewDecision::Keep,
    }
}

pub fn extraction_schema() -> ResponseSchema {
    ResponseSchema::new("extraction")
        .required("found", FieldKind::Bool)
        .optional("question", FieldKind::String)
        .optional("answer", FieldKind::String)
}

/// Extracts an analyst-provided resolution into a provisional QA pair.
/// No analyst message in the follow-up, no definitive answer, or a model
/// failure all mean no mutation.
pub fn extract_from_unanswered(task: &ExtractionTask, gateway: &Gateway, store: &KnowledgeStore) -> Result<Option<EntryId>, StoreError> {
    let key = task.key();
    if let Some(id) = store.view().tasks.get(&key).and_then(|ids| ids.first()) {
        return Ok(Some(*id));
    }
    if !task.follow_up.iter().any(|m| m.author == AuthorRole::Analyst) {
        return Ok(None);
    }
    let mut dialogue: Vec<Turn> = task.follow_up.iter().map(Turn::from_message).collect();
    dialogue.push(Turn::instruction(format!("# Question\n{}", task.question.text)));
    let req = StructuredRequest { system_prompt: gateway.prompt(PromptId::Extract), dialogue, response_schema: extraction_schema() };
    let reply = match gateway.complete_structured(&req) {
        Ok(r) => r,
        Err(e) => {
            warn!(session = %task.session_id, error = %e, "extraction failed");
            return Ok(None);
        }
    };
    if reply["found"].as_bool() != Some(true) {
        return Ok(None);
    }
    let q = reply["question"].as_str().map(str::trim).filter(|s| !s.is_empty()).unwrap_or(&task.question.text);
    let Some(a) = reply["answer"].as_str().map(str::trim).filter(|s| !s.is_empty()) else {
        return Ok(None);
    };
    let cause = MutationCause::UnansweredExtraction {
        session_id: task.session_id.clone(),
        message_id: task.question.original_message_id.to_string(),
    };
    let id = store.insert_qa(gateway, q, a, Provenance::Session(task.session_id.clone()), EntryStatus::Provisional, cause, Some(&key))?;
    Ok(Some(id))
}

/// Unique human-shared links in order of first appearance.
pub fn session_links(messages: &[Message]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    messages
        .iter()
        .filter(|m| m.author != AuthorRole::Agent)
        .flat_map(|m| m.links.iter())
        .filter(|u| seen.insert(u.as_str()))
        .cloned()
        .collect()
}

/// Fetches each unique link once and ingests it. Failures are skipped.
pub fn harvest_links(
    session_id: &SessionId,
    messages: &[Message],
    fetcher: &dyn DocumentFetcher,
    store: &KnowledgeStore,
    gateway: &Gateway,
) -> Vec<(String, Result<Vec<EntryId>, String>)> {
    let mut out = Vec::new();
    for url in session_links(messages) {
        let key = format!("harvest:{session_id}:{url}");
        if store.view().task_done(&key) {
            continue;
        }
        let result = fetcher.fetch(&url).map_err(|e| e.to_string()).and_then(|text| {
            let cause = MutationCause::DocIngestion { url: url.clone(), session_id: Some(session_id.clone()) };
            store.ingest_document(gateway, &url, &text, cause, Some(&key)).map_err(|e| e.to_string())
        });
        if let Err(e) = &result {
            warn!(%url, error = %e, "link harvest skipped");
        }
        out.push((url, result));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewPath {
    Accepted,
    Review,
    Extraction,
    Harvest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: String,
    pub path: ReviewPath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_message_id: Option<MessageId>,
    /// Review action, extraction result, or a skip reason.
    pub detail: String,
    pub entry_ids: Vec<EntryId>,
    pub mutations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub session_id: Option<SessionId>,
    pub outcomes: Vec<TaskOutcome>,
}

impl ReviewSummary {
    pub fn count(&self, path: ReviewPath) -> usize {
        self.outcomes.iter().filter(|o| o.path == path).count()
    }

    pub fn mutations(&self) -> usize {
        self.outcomes.iter().map(|o| o.mutations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewOptions {
    /// Review sent-but-unaccepted cards.
    pub answer_review: bool,
    pub extraction: bool,
    pub harvest: bool,
}

impl Default for ReviewOptions {
    fn default() -> Self {
        Self { answer_review: true, extraction: true, harvest: true }
    }
}

/// Closure-time pass over every within-scope question of `session`,
/// followed by link harvesting.
pub fn run_session_review(
    session: &Session,
    gateway: &Gateway,
    store: &KnowledgeStore,
    fetcher: &dyn DocumentFetcher,
    opts: ReviewOptions,
) -> ReviewSummary {
    let mut summary = ReviewSummary { session_id: Some(session.id.clone()), outcomes: Vec::new() };
    for tracked in &session.questions {
        let qid = Some(tracked.trigger_message_id.clone());
        let outcome = match &tracked.outcome {
            QuestionOutcome::Refused => {
                let task = ExtractionTask::build(session, tracked.trigger_seq, &tracked.question);
                let key = task.key();
                if !opts.extraction {
                    TaskOutcome {
                        task: key,
                        path: ReviewPath::Extraction,
                        question_message_id: qid,
                        detail: "disabled".into(),
                        entry_ids: vec![],
                        mutations: 0,
                        error: None,
                    }
                } else {
                    let before = store.version();
                    match extract_from_unanswered(&task, gateway, store) {
                        Ok(id) => TaskOutcome {
                            task: key,
                            path: ReviewPath::Extraction,
                            question_message_id: qid,
                            detail: if id.is_some() { "extracted".into() } else { "no definitive answer".into() },
                            entry_ids: id.into_iter().collect(),
                            mutations: (store.version() - before) as usize,
                            error: None,
                        },
                        Err(e) => TaskOutcome {
                            task: key,
                            path: ReviewPath::Extraction,
                            question_message_id: qid,
                            detail: "failed".into(),
                            entry_ids: vec![],
                            mutations: 0,
                            error: Some(e.to_string()),
                        },
                    }
                }
            }
            QuestionOutcome::Card(card_id) => {
                let Some(card) = session.card(card_id) else {
                    continue;
                };
                // a suppressed answer rides on the card it duplicated
                let routed = match card.status {
                    CardStatus::Suppressed => card.duplicate_of.as_ref().and_then(|id| session.card(id)).unwrap_or(card),
                    _ => card,
                };
                let key = format!("review:{}:{}", session.id, routed.id);
                match (card.status, routed.status) {
                    (_, CardStatus::Accepted) => TaskOutcome {
                        task: format!("accept:{}", routed.id),
                        path: ReviewPath::Accepted,
                        question_message_id: qid,
                        detail: "handled at accept time".into(),
                        entry_ids: vec![],
                        mutations: 0,
                        error: None,
                    },
                    (CardStatus::Suppressed, _) => TaskOutcome {
                        task: key,
                        path: ReviewPath::Review,
                        question_message_id: qid,
                        detail: format!("covered by review of {}", routed.id),
                        entry_ids: vec![],
                        mutations: 0,
                        error: None,
                    },
                    _ if !opts.answer_review => TaskOutcome {
                        task: key,
                        path: ReviewPath::Review,
                        question_message_id: qid,
                        detail: "disabled".into(),
                        entry_ids: vec![],
                        mutations: 0,
                        error: None,
                    },
                    _ => review_one(session, card, &tracked.question, gateway, store, key, qid),
                }
            }
        };
        summary.outcomes.push(outcome);
    }
    if opts.harvest {
        for (url, result) in harvest_links(&session.id, &session.messages, fetcher, store, gateway) {
            let task = format!("harvest:{}:{url}", session.id);
            summary.outcomes.push(match result {
                Ok(ids) => TaskOutcome {
                    task,
                    path: ReviewPath::Harvest,
                    question_message_id: None,
                    detail: url,
                    mutations: ids.len(),
                    entry_ids: ids,
                    error: None,
                },
                Err(e) => TaskOutcome {
                    task,
                    path: ReviewPath::Harvest,
                    question_message_id: None,
                    detail: url,
                    entry_ids: vec![],
                    mutations: 0,
                    error: Some(e),
                },
            });
        }
    }
    info!(session = %session.id, tasks = summary.outcomes.len(), mutations = summary.mutations(), "session review done");
    summary
}

fn review_one(
    session: &Session,
    card: &AnswerCard,
    question: &RewrittenQuestion,
    gateway: &Gateway,
    store: &KnowledgeStore,
    key: String,
    qid: Option<MessageId>,
) -> TaskOutcome {
    let mut outcome = TaskOutcome {
        task: key.clone(),
        path: ReviewPath::Review,
        question_message_id: qid,
        detail: String::new(),
        entry_ids: vec![],
        mutations: 0,
        error: None,
    };
    if let Some(ids) = store.view().tasks.get(&key) {
        outcome.detail = "already applied".into();
        outcome.entry_ids = ids.clone();
        return outcome;
    }
    let Some(task) = ReviewTask::build(session, card, question) else {
        outcome.detail = "not reviewable".into();
        return outcome;
    };
    let decision = review_unaccepted(&task, &store.view(), gateway);
    outcome.detail = decision.label().to_string();
    match store.apply_review(gateway, &decision, card, Some(&key)) {
        Ok(records) => {
            outcome.mutations = records.len();
            outcome.entry_ids = records.iter().map(|r| r.entry_id).collect();
        }
        Err(e) => {
            warn!(card = %card.id, error = %e, "review decision dropped");
            outcome.error = Some(e.to_string());
        }
    }
    outcome
}
