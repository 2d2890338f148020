//! Labeled transcript corpora in JSON Lines.
//!
//! A session starts with a header line carrying its labels; the message
//! lines that follow belong to it until the next header:
//!
//! ```text
//! {"session_id": "s1", "labels": {"scope": {"m2": "Within Scope"}}}
//! {"id": "m1", "author": "Analyst", "text": "Hi, looking now."}
//! {"id": "m2", "author": "Customer", "text": "Why does the upload fail?"}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use oncall_core::domain::{AuthorRole, Message, MessageId, ScopeClass, SessionId};
use serde::{Deserialize, Serialize};

use crate::error::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Correctness {
    Correct,
    Incorrect,
}

impl Correctness {
    pub fn label(self) -> &'static str {
        match self {
            Self::Correct => "Correct",
            Self::Incorrect => "Incorrect",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionLabels {
    /// Gold scope per customer message id.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub scope: BTreeMap<MessageId, ScopeClass>,
    /// Dedup gold: whether an answer to this trigger should be shown.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub answer_expected: BTreeMap<MessageId, bool>,
    /// Human verdict on the card answering this trigger.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub card_correct: BTreeMap<MessageId, Correctness>,
    /// Triggers whose card the customer accepts as soon as it arrives.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub accept: Vec<MessageId>,
}

/// One message line. The session id comes from the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageLine {
    pub id: MessageId,
    pub author: AuthorRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<u64>,
}

impl MessageLine {
    pub fn new(id: &str, author: AuthorRole, text: &str) -> Self {
        Self { id: MessageId::new(id), author, text: text.into(), attachments: Vec::new(), at_ms: None }
    }

    pub fn to_message(&self, session: &SessionId) -> Message {
        let mut m =
            Message::new(self.id.as_str(), session.clone(), self.author, self.text.as_str()).with_attachments(self.attachments.clone());
        m.at_ms = self.at_ms;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    session_id: SessionId,
    #[serde(default)]
    labels: SessionLabels,
    #[serde(default = "default_true")]
    close: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSession {
    pub session_id: SessionId,
    pub labels: SessionLabels,
    pub messages: Vec<MessageLine>,
    /// Close the session after its last message.
    pub close: bool,
}

impl CorpusSession {
    pub fn new(id: &str) -> Self {
        Self { session_id: SessionId::from(id), labels: SessionLabels::default(), messages: Vec::new(), close: true }
    }

    /// Customer messages posted after the first analyst message.
    pub fn active_customer_messages(&self) -> impl Iterator<Item = &MessageLine> {
        let start = self.messages.iter().position(|m| m.author == AuthorRole::Analyst).unwrap_or(self.messages.len());
        self.messages[start..].iter().filter(|m| m.author == AuthorRole::Customer)
    }

    pub fn message(&self, id: &MessageId) -> Option<&MessageLine> {
        self.messages.iter().find(|m| &m.id == id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCorpus {
    pub sessions: Vec<CorpusSession>,
}

impl LabeledCorpus {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut sessions: Vec<CorpusSession> = Vec::new();
        // line number of each message, for validation errors
        let mut lines: BTreeMap<(usize, MessageId), usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| EvalError::corpus(line, e))?;
            if value.get("session_id").is_some() {
                let h: Header = serde_json::from_value(value).map_err(|e| EvalError::corpus(line, e))?;
                if sessions.iter().any(|s| s.session_id == h.session_id) {
                    return Err(EvalError::corpus(line, format!("duplicate session {}", h.session_id)));
                }
                sessions.push(CorpusSession { session_id: h.session_id, labels: h.labels, messages: Vec::new(), close: h.close });
            } else {
                let m: MessageLine = serde_json::from_value(value).map_err(|e| EvalError::corpus(line, e))?;
                let idx = sessions.len().checked_sub(1).ok_or_else(|| EvalError::corpus(line, "message before any session header"))?;
                if lines.insert((idx, m.id.clone()), line).is_some() {
                    return Err(EvalError::corpus(line, format!("duplicate message id {}", m.id)));
                }
                sessions[idx].messages.push(m);
            }
        }
        let corpus = Self { sessions };
        for (idx, s) in corpus.sessions.iter().enumerate() {
            for m in s.active_customer_messages() {
                if !s.labels.scope.contains_key(&m.id) {
                    return Err(EvalError::corpus(lines[&(idx, m.id.clone())], format!("customer message {} has no scope label", m.id)));
                }
            }
        }
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            let h = Header { session_id: s.session_id.clone(), labels: s.labels.clone(), close: s.close };
            out.push_str(&serde_json::to_string(&h).expect("header serializes"));
            out.push('\n');
            for m in &s.messages {
                out.push_str(&serde_json::to_string(m).expect("message serializes"));
                out.push('\n');
            }
        }
        out
    }

    /// Gold support per scope class over all labeled messages.
    pub fn class_counts(&self) -> BTreeMap<ScopeClass, usize> {
        let mut n = BTreeMap::new();
        for c in self.sessions.iter().flat_map(|s| s.labels.scope.values()) {
            *n.entry(*c).or_insert(0) += 1;
        }
        n
    }

    pub fn session(&self, id: &SessionId) -> Option<&CorpusSession> {
        self.sessions.iter().find(|s| &s.session_id == id)
    }
}
