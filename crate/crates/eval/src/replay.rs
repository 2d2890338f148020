//! Sequential corpus replay through the full engine.
//!
//! Sessions run one after another in corpus order. Later sessions may use
//! knowledge learned from earlier ones, so the order is part of the result.

use std::collections::BTreeMap;

use oncall_core::domain::{CardId, CardStatus, Embedding, EntryId, MessageId, QuestionOutcome, ScopeClass, SessionId};
use oncall_core::engine::{Effect, Engine, SessionEvent};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::corpus::{CorpusSession, LabeledCorpus};
use crate::error::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardPrediction {
    pub card_id: CardId,
    pub trigger_message_id: MessageId,
    pub rewritten_question: String,
    pub answer_text: String,
    pub status: CardStatus,
    pub citations: Vec<EntryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<CardId>,
    /// Answer embedding, kept out of prediction files.
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

impl CardPrediction {
    pub fn was_sent(&self) -> bool {
        self.status.was_sent()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPrediction {
    pub session_id: SessionId,
    pub verdicts: BTreeMap<MessageId, ScopeClass>,
    pub cards: Vec<CardPrediction>,
    pub refusals: Vec<MessageId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub sessions: Vec<SessionPrediction>,
    pub store_version: u64,
    pub store_hash: String,
}

impl Predictions {
    /// Diff-stable JSON (fixed field order, no embeddings).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("predictions serialize");
        s.push('\n');
        s
    }

    pub fn sent_cards(&self) -> impl Iterator<Item = (&SessionId, &CardPrediction)> {
        self.sessions.iter().flat_map(|s| s.cards.iter().filter(|c| c.was_sent()).map(move |c| (&s.session_id, c)))
    }

    pub fn session(&self, id: &SessionId) -> Option<&SessionPrediction> {
        self.sessions.iter().find(|s| &s.session_id == id)
    }
}

fn accept_cards(engine: &Engine, session: &CorpusSession, effects: &[Effect]) -> Result<(), EvalError> {
    for e in effects {
        if let Effect::Card { card } = e {
            if session.labels.accept.contains(&card.trigger_message_id) {
                debug!(card = %card.id, "corpus accepts card");
                engine.submit(SessionEvent::CardAccepted { card_id: card.id.clone() })?;
            }
        }
    }
    Ok(())
}

fn replay_session(engine: &Engine, session: &CorpusSession) -> Result<(), EvalError> {
    let sid = session.session_id.clone();
    engine.submit(SessionEvent::SessionOpened { session_id: sid.clone() })?;
    for line in &session.messages {
        let out = engine.submit(SessionEvent::MessagePosted { message: line.to_message(&sid) })?;
        accept_cards(engine, session, &out.effects)?;
    }
    if session.close {
        let out = engine.submit(SessionEvent::SessionClosed { session_id: sid })?;
        accept_cards(engine, session, &out.effects)?;
    }
    Ok(())
}

/// Replays `corpus` into `engine` and collects what it decided.
pub fn replay(engine: &Engine, corpus: &LabeledCorpus) -> Result<Predictions, EvalError> {
    for s in &corpus.sessions {
        replay_session(engine, s)?;
    }
    engine.run_pending_reviews();
    let mut out = Predictions::default();
    for s in &corpus.sessions {
        let session = engine.session(&s.session_id).ok_or_else(|| EvalError::Scenario(format!("session {} vanished", s.session_id)))?;
        out.sessions.push(SessionPrediction {
            session_id: session.id.clone(),
            verdicts: session.verdicts.iter().map(|v| (v.message_id.clone(), v.scope)).collect(),
            cards: session
                .cards
                .iter()
                .map(|c| CardPrediction {
                    card_id: c.id.clone(),
                    trigger_message_id: c.trigger_message_id.clone(),
                    rewritten_question: c.rewritten_question.clone(),
                    answer_text: c.answer_text.clone(),
                    status: c.status,
                    citations: c.citation_ids(),
                    duplicate_of: c.duplicate_of.clone(),
                    embedding: Some(c.embedding.clone()),
                })
                .collect(),
            refusals: session
                .questions
                .iter()
                .filter(|q| q.outcome == QuestionOutcome::Refused)
                .map(|q| q.trigger_message_id.clone())
                .collect(),
        });
    }
    let snap = engine.store().view();
    out.store_version = snap.version;
    out.store_hash = snap.hash();
    Ok(out)
}
