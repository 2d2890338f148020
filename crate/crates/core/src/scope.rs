//! When to speak: the action-cycle gate and three-way scope classification.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::domain::{AuthorRole, Message, MessageId, ScopeClass, Session, SessionState};
use crate::gateway::{FieldKind, Gateway, ResponseSchema, StructuredRequest, Turn};
use crate::prompts::PromptId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeVerdict {
    pub message_id: MessageId,
    pub scope: ScopeClass,
    pub decided_at_seq: u64,
}

pub fn is_cycle_active(session: &Session) -> bool {
    session.state == SessionState::ActiveCycle
}

pub fn classification_schema() -> ResponseSchema {
    let labels = ScopeClass::ALL.iter().map(|c| c.label().to_string()).collect();
    ResponseSchema::new("scope_classification").required("class", FieldKind::Enum(labels))
}

/// Dialogue up to and including `through_seq`, as model turns.
pub(crate) fn dialogue_through(session: &Session, through_seq: u64) -> Vec<Turn> {
    session.messages_through(through_seq).iter().map(Turn::from_message).collect()
}

/// Classifies a batch of consecutive customer messages as one unit. The
/// whole dialogue up to the last message is context; the batch itself is
/// presented as the newly added messages.
///
/// Model failures degrade to [`ScopeClass::NoAssistanceNeeded`].
pub fn classify_batch(session: &Session, batch: &[&Message], gateway: &Gateway) -> ScopeClass {
    let Some(last) = batch.last() else {
        return ScopeClass::NoAssistanceNeeded;
    };
    let mut dialogue = dialogue_through(session, last.seq);
    let added: Vec<&str> = batch.iter().map(|m| m.text.as_str()).collect();
    dialogue.push(Turn::instruction(format!("# Newly added messages\n{}", added.join("\n"))));
    let req = StructuredRequest { system_prompt: gateway.prompt(PromptId::Identify), dialogue, response_schema: classification_schema() };
    match gateway.complete_structured(&req) {
        Ok(reply) => reply.get("class").and_then(Value::as_str).and_then(ScopeClass::from_label).unwrap_or(ScopeClass::NoAssistanceNeeded),
        Err(e) => {
            warn!(session = %session.id, message = %last.id, error = %e, "classification failed, staying silent");
            ScopeClass::NoAssistanceNeeded
        }
    }
}

/// Verdict for a single customer message inside the action cycle. Returns
/// `None` when the gate is closed or the author is not the customer; the
/// caller records returned verdicts on the session.
pub fn classify_message(session: &Session, msg: &Message, gateway: &Gateway) -> Option<ScopeVerdict> {
    if !is_cycle_active(session) || msg.author != AuthorRole::Customer {
        return None;
    }
    if session.analyst_joined_seq.is_none_or(|joined| msg.seq < joined) {
        return None;
    }
    Some(ScopeVerdict { message_id: msg.id.clone(), scope: classify_batch(session, &[msg], gateway), decided_at_seq: session.last_seq() })
}

/// Whether the analyst has already resolved what `msg` asks. The main path
/// folds this judgement into classification; this standalone check exists
/// for inspection. Failures answer `true`, the silent choice.
pub fn question_already_answered(session: &Session, msg: &Message, gateway: &Gateway) -> bool {
    let mut dialogue = dialogue_through(session, msg.seq);
    dialogue.push(Turn::instruction(format!("# Check\n{}", msg.text)));
    let req = StructuredRequest {
        system_prompt: gateway.prompt(PromptId::AlreadyAnswered),
        dialogue,
        response_schema: ResponseSchema::new("already_answered").required("already_answered", FieldKind::Bool),
    };
    match gateway.complete_structured(&req) {
        Ok(reply) => reply["already_answered"].as_bool().unwrap_or(true),
        Err(e) => {
            warn!(session = %session.id, error = %e, "already-answered check failed");
            true
        }
    }
}
