//! Shared vocabulary: sessions, messages, answer cards, knowledge entries,
//! review decisions and metric reports.
//!
//! Types here only construct and validate themselves. State transitions that
//! every other module relies on (session life-cycle, sequence assignment) are
//! enforced on [`Session`] so no caller can move a session backwards.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::answer::RewrittenQuestion;
use crate::error::DomainError;
use crate::scope::ScopeVerdict;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifier of an on-call session.
    SessionId
);
string_id!(MessageId);
string_id!(CardId);

/// Knowledge entry identifier. Allocated from a store-wide counter and never
/// reused after deletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl std::str::FromStr for EntryId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix('e').unwrap_or(s);
        digits.parse::<u64>().map(EntryId).map_err(|_| DomainError::Invalid(format!("malformed entry id `{s}`")))
    }
}

/// Session ids travel in URL paths and seed card ids, so they are kept to a
/// conservative character set.
pub fn validate_session_id(id: &str) -> Result<(), DomainError> {
    let ok = !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(DomainError::Invalid(format!("session id `{id}` must be 1-128 chars of [A-Za-z0-9._-]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuthorRole {
    Customer,
    Analyst,
    Agent,
}

impl AuthorRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Customer => "Customer",
            Self::Analyst => "Analyst",
            Self::Agent => "Agent",
        }
    }
}

impl std::str::FromStr for AuthorRole {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "customer" => Ok(Self::Customer),
            "analyst" => Ok(Self::Analyst),
            "agent" => Ok(Self::Agent),
            _ => Err(DomainError::Invalid(format!("unknown author role `{s}`"))),
        }
    }
}

/// Session life-cycle. Ordered: transitions only ever increase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionState {
    PreEscalation,
    ActiveCycle,
    Closed,
}

/// Three-way scope verdict. Serialized labels are fixed strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScopeClass {
    #[serde(rename = "Within Scope")]
    WithinScope,
    #[serde(rename = "Out of Scope")]
    OutOfScope,
    #[serde(rename = "No assistance needed")]
    NoAssistanceNeeded,
}

impl ScopeClass {
    pub const ALL: [ScopeClass; 3] = [Self::WithinScope, Self::OutOfScope, Self::NoAssistanceNeeded];

    pub fn label(&self) -> &'static str {
        match self {
            Self::WithinScope => "Within Scope",
            Self::OutOfScope => "Out of Scope",
            Self::NoAssistanceNeeded => "No assistance needed",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for ScopeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CardStatus {
    Sent,
    Suppressed,
    Accepted,
}

impl CardStatus {
    /// Cards a customer has actually seen.
    pub fn was_sent(&self) -> bool {
        matches!(self, Self::Sent | Self::Accepted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    QAPair,
    DocChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryStatus {
    Provisional,
    Validated,
}

/// Where a knowledge entry came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Session(SessionId),
    Url(String),
    ManualSeed,
}

/// A unit-norm embedding vector. Normalization happens once at construction so
/// cosine similarity is a plain dot product everywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl Embedding {
    /// Normalizes `raw`; `None` for empty, zero or non-finite input.
    pub fn normalized(raw: &[f32]) -> Option<Self> {
        let norm = raw.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        if raw.is_empty() || !norm.is_finite() || norm == 0.0 {
            return None;
        }
        Some(Self(raw.iter().map(|x| (f64::from(*x) / norm) as f32).collect()))
    }

    /// Wraps an already-normalized vector, checking the norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, DomainError> {
        let e = Self(values);
        if e.is_unit() {
            Ok(e)
        } else {
            Err(DomainError::Invalid(format!("embedding norm {} is not 1", e.norm())))
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub session_id: SessionId,
    pub author: AuthorRole,
    /// Per-session ordering key, assigned by [`Session::append_message`].
    #[serde(default, alias = "timestamp")]
    pub seq: u64,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    #[serde(default)]
    pub links: Vec<String>,
    /// Simulated or wall-clock time in milliseconds. Metadata only; ordering
    /// always uses `seq`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<u64>,
    /// Set on agent messages that render an answer card.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub card_id: Option<CardId>,
}

impl Message {
    pub fn new(id: impl Into<String>, session_id: SessionId, author: AuthorRole, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id: MessageId::new(id),
            session_id,
            author,
            seq: 0,
            links: extract_links(&text),
            text,
            attachments: Vec::new(),
            at_ms: None,
            card_id: None,
        }
    }

    pub fn with_attachments(mut self, attachments: Vec<String>) -> Self {
        self.attachments = attachments;
        self
    }

    pub fn at(mut self, at_ms: u64) -> Self {
        self.at_ms = Some(at_ms);
        self
    }
}

/// Display metadata for one cited knowledge entry, frozen when the card is
/// generated so historical cards stay renderable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub entry_id: EntryId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCard {
    pub id: CardId,
    pub session_id: SessionId,
    pub trigger_message_id: MessageId,
    pub rewritten_question: String,
    pub answer_text: String,
    pub citations: Vec<Citation>,
    pub embedding: Embedding,
    pub status: CardStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent_seq: Option<u64>,
    /// For suppressed cards, the sent card it duplicated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<CardId>,
}

impl AnswerCard {
    pub fn citation_ids(&self) -> Vec<EntryId> {
        self.citations.iter().map(|c| c.entry_id).collect()
    }
}

/// Outcome of the answer pipeline for one within-scope question, kept on the
/// session so closure review can route it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuestionOutcome {
    Refused,
    Card(CardId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedQuestion {
    pub trigger_message_id: MessageId,
    pub trigger_seq: u64,
    pub question: RewrittenQuestion,
    pub outcome: QuestionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub messages: Vec<Message>,
    pub state: SessionState,
    pub analyst_joined_seq: Option<u64>,
    pub cards: Vec<AnswerCard>,
    #[serde(default)]
    pub verdicts: Vec<ScopeVerdict>,
    #[serde(default)]
    pub questions: Vec<TrackedQuestion>,
}

impl Session {
    pub fn new(id: SessionId) -> Self {
        Self {
            id,
            messages: Vec::new(),
            state: SessionState::PreEscalation,
            analyst_joined_seq: None,
            cards: Vec::new(),
            verdicts: Vec::new(),
            questions: Vec::new(),
        }
    }

    pub fn last_seq(&self) -> u64 {
        self.messages.last().map_or(0, |m| m.seq)
    }

    /// Appends a message, assigning the next sequence number. The first
    /// analyst message opens the action cycle.
    pub fn append_message(&mut self, mut msg: Message) -> Result<&Message, DomainError> {
        if self.state == SessionState::Closed {
            return Err(DomainError::SessionClosed(self.id.clone()));
        }
        if msg.session_id != self.id {
            return Err(DomainError::Invalid(format!("message {} belongs to session {}, not {}", msg.id, msg.session_id, self.id)));
        }
        if self.messages.iter().any(|m| m.id == msg.id) {
            return Err(DomainError::Invalid(format!("duplicate message id {}", msg.id)));
        }
        msg.seq = self.last_seq() + 1;
        msg.links = extract_links(&msg.text);
        if msg.author == AuthorRole::Analyst && self.state == SessionState::PreEscalation {
            self.state = SessionState::ActiveCycle;
            self.analyst_joined_seq = Some(msg.seq);
        }
        self.messages.push(msg);
        Ok(self.messages.last().expect("just pushed"))
    }

    pub fn close(&mut self) -> Result<(), DomainError> {
        if self.state == SessionState::Closed {
            return Err(DomainError::SessionClosed(self.id.clone()));
        }
        self.state = SessionState::Closed;
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::ActiveCycle
    }

    pub fn message(&self, id: &MessageId) -> Option<&Message> {
        self.messages.iter().find(|m| &m.id == id)
    }

    pub fn card(&self, id: &CardId) -> Option<&AnswerCard> {
        self.cards.iter().find(|c| &c.id == id)
    }

    pub fn card_mut(&mut self, id: &CardId) -> Option<&mut AnswerCard> {
        self.cards.iter_mut().find(|c| &c.id == id)
    }

    /// Messages with sequence strictly greater than `seq`.
    pub fn messages_after(&self, seq: u64) -> &[Message] {
        let start = self.messages.partition_point(|m| m.seq <= seq);
        &self.messages[start..]
    }

    /// Messages with sequence at most `seq`.
    pub fn messages_through(&self, seq: u64) -> &[Message] {
        let end = self.messages.partition_point(|m| m.seq <= seq);
        &self.messages[..end]
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |why: String| Err(DomainError::Invariant(format!("session {}: {why}", self.id)));
        for pair in self.messages.windows(2) {
            if pair[1].seq <= pair[0].seq {
                return bad(format!("sequence {} does not follow {}", pair[1].seq, pair[0].seq));
            }
        }
        let first_analyst = self.messages.iter().find(|m| m.author == AuthorRole::Analyst).map(|m| m.seq);
        match (self.state, self.analyst_joined_seq) {
            (SessionState::PreEscalation, Some(_)) => return bad("analyst_joined_seq set before escalation".into()),
            (SessionState::ActiveCycle, None) => return bad("active cycle without analyst_joined_seq".into()),
            _ => {}
        }
        if let Some(joined) = self.analyst_joined_seq {
            if first_analyst != Some(joined) {
                return bad("analyst_joined_seq is not the first analyst message".into());
            }
        }
        for card in &self.cards {
            let Some(trigger) = self.message(&card.trigger_message_id) else {
                return bad(format!("card {} has unknown trigger", card.id));
            };
            if self.analyst_joined_seq.is_none_or(|joined| trigger.seq < joined) {
                return bad(format!("card {} triggered outside the action cycle", card.id));
            }
            if !card.embedding.is_unit() {
                return bad(format!("card {} embedding is not unit norm", card.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: EntryId,
    pub kind: EntryKind,
    /// Empty for document chunks.
    pub question: String,
    pub content: String,
    pub source: Provenance,
    pub status: EntryStatus,
    pub embedding: Embedding,
    pub created_seq: u64,
    pub updated_seq: u64,
}

impl KnowledgeEntry {
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |why: &str| Err(DomainError::Invariant(format!("entry {}: {why}", self.id)));
        match self.kind {
            EntryKind::QAPair if self.question.trim().is_empty() => fail("QA pair without question"),
            EntryKind::DocChunk if !self.question.is_empty() => fail("document chunk with question"),
            _ if self.content.trim().is_empty() => fail("empty content"),
            _ if !self.embedding.is_unit() => fail("embedding not unit norm"),
            _ => Ok(()),
        }
    }

    pub fn url(&self) -> Option<&str> {
        match &self.source {
            Provenance::Url(u) => Some(u),
            _ => None,
        }
    }

    /// Short human-readable title used by citation rendering.
    pub fn title(&self) -> String {
        let base = match self.kind {
            EntryKind::QAPair => self.question.as_str(),
            EntryKind::DocChunk => self.content.as_str(),
        };
        let line = base.lines().next().unwrap_or("").trim();
        if line.chars().count() > 80 {
            let cut: String = line.chars().take(77).collect();
            format!("{cut}...")
        } else {
            line.to_string()
        }
    }

    pub fn citation(&self) -> Citation {
        Citation { entry_id: self.id, title: self.title(), url: self.url().map(str::to_string) }
    }
}

/// Knowledge maintenance action chosen after reviewing an unaccepted answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action")]
pub enum ReviewDecision {
    Keep,
    Delete { entry_ids: Vec<EntryId> },
    Update { entry_id: EntryId, new_question: String, new_content: String },
}

impl ReviewDecision {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Keep => "Keep",
            Self::Delete { .. } => "Delete",
            Self::Update { .. } => "Update",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub theta: f64,
    pub clamp_negative: bool,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { theta: 0.7, clamp_negative: true }
    }
}

impl DedupConfig {
    pub fn with_theta(theta: f64) -> Result<Self, DomainError> {
        let cfg = Self { theta, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if (0.0..=1.0).contains(&self.theta) {
            Ok(())
        } else {
            Err(DomainError::Invalid(format!("theta {} outside [0, 1]", self.theta)))
        }
    }
}

/// Confusion counts and derived scores for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub total: u64,
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
}

impl MetricsReport {
    /// Builds the report from aligned gold/predicted labels. Classes are the
    /// union of observed labels; weights are gold supports.
    pub fn from_labels<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<Self, DomainError> {
        if gold.len() != pred.len() {
            return Err(DomainError::Invalid(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
        }
        let mut classes: BTreeMap<String, ClassMetrics> = BTreeMap::new();
        for label in gold.iter().chain(pred) {
            classes.entry(label.as_ref().to_string()).or_insert(ClassMetrics {
                n: 0,
                tp: 0,
                fp: 0,
                fn_: 0,
                tn: 0,
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            });
        }
        let total = gold.len() as u64;
        for (g, p) in gold.iter().zip(pred) {
            let (g, p) = (g.as_ref(), p.as_ref());
            for (class, m) in classes.iter_mut() {
                let is_gold = g == class;
                let is_pred = p == class;
                if is_gold {
                    m.n += 1;
                }
                match (is_gold, is_pred) {
                    (true, true) => m.tp += 1,
                    (false, true) => m.fp += 1,
                    (true, false) => m.fn_ += 1,
                    (false, false) => m.tn += 1,
                }
            }
        }
        let mut correct = 0;
        let (mut pw, mut rw, mut fw) = (0.0, 0.0, 0.0);
        for m in classes.values_mut() {
            m.precision = ratio(m.tp, m.tp + m.fp);
            m.recall = ratio(m.tp, m.tp + m.fn_);
            m.f1 = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
            correct += m.tp;
            pw += m.n as f64 * m.precision;
            rw += m.n as f64 * m.recall;
            fw += m.n as f64 * m.f1;
        }
        let support = total as f64;
        let weighted = |x: f64| if total == 0 { 0.0 } else { x / support };
        Ok(Self {
            per_class: classes,
            total,
            accuracy: ratio(correct, total),
            precision_w: weighted(pw),
            recall_w: weighted(rw),
            f1_w: weighted(fw),
        })
    }

    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.per_class.get(label)
    }
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"https?://[^\s<>"'`]+"#).expect("static regex"))
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '\'', '"'];

/// All http/https URLs in `text`, in order of appearance, duplicates kept.
/// Trailing sentence punctuation is not part of the URL.
pub fn extract_links(text: &str) -> Vec<String> {
    url_regex()
        .find_iter(text)
        .map(|m| m.as_str().trim_end_matches(TRAILING_PUNCT).to_string())
        .filter(|u| u.len() > u.find("://").map_or(0, |i| i + 3))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Character-scan oracle: find every scheme prefix and consume until a
    /// delimiter, then drop trailing punctuation.
    fn scan_links(text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let rest: String = chars[i..].iter().take(8).collect();
            let scheme_len = if rest.starts_with("https://") {
                8
            } else if rest.starts_with("http://") {
                7
            } else {
                0
            };
            if scheme_len == 0 {
                i += 1;
                continue;
            }
            let mut j = i + scheme_len;
            while j < chars.len() && !chars[j].is_whitespace() && !"<>\"'`".contains(chars[j]) {
                j += 1;
            }
            let mut end = j;
            while end > i + scheme_len && TRAILING_PUNCT.contains(&chars[end - 1]) {
                end -= 1;
            }
            if end > i + scheme_len {
                out.push(chars[i..end].iter().collect());
            }
            i = j;
        }
        out
    }

    #[test]
    fn links_in_order() {
        let text = "see https://docs.example.com/a and https://x.io/b";
        assert_eq!(extract_links(text), vec!["https://docs.example.com/a", "https://x.io/b"]);
    }

    #[test]
    fn no_links() {
        assert!(extract_links("no links here").is_empty());
    }

    #[test]
    fn duplicate_links_preserved() {
        let text = "dup https://a.io https://a.io";
        assert_eq!(scan_links(text), vec!["https://a.io", "https://a.io"]);
        assert_eq!(extract_links(text), scan_links(text));
    }

    #[test]
    fn trailing_punctuation_dropped() {
        let text = "Guide: https://docs.example.com/ecs/migrate. Also (http://x.io/y), ok?";
        assert_eq!(extract_links(text), vec!["https://docs.example.com/ecs/migrate", "http://x.io/y"]);
        assert_eq!(extract_links(text), scan_links(text));
    }

    #[test]
    fn scope_labels_are_exact() {
        for (class, label) in [
            (ScopeClass::WithinScope, "\"Within Scope\""),
            (ScopeClass::OutOfScope, "\"Out of Scope\""),
            (ScopeClass::NoAssistanceNeeded, "\"No assistance needed\""),
        ] {
            assert_eq!(serde_json::to_string(&class).unwrap(), label);
            assert_eq!(serde_json::from_str::<ScopeClass>(label).unwrap(), class);
        }
    }

    #[test]
    fn analyst_message_opens_cycle() {
        let sid = SessionId::from("s1");
        let mut s = Session::new(sid.clone());
        s.append_message(Message::new("m1", sid.clone(), AuthorRole::Customer, "hi")).unwrap();
        assert_eq!(s.state, SessionState::PreEscalation);
        s.append_message(Message::new("m2", sid.clone(), AuthorRole::Analyst, "hello")).unwrap();
        assert_eq!(s.state, SessionState::ActiveCycle);
        assert_eq!(s.analyst_joined_seq, Some(2));
        s.append_message(Message::new("m3", sid.clone(), AuthorRole::Analyst, "again")).unwrap();
        assert_eq!(s.analyst_joined_seq, Some(2));
        s.close().unwrap();
        assert!(s.append_message(Message::new("m4", sid, AuthorRole::Customer, "x")).is_err());
        assert!(s.close().is_err());
        s.validate().unwrap();
    }

    #[test]
    fn metrics_hand_built_confusion() {
        // n = [3, 1]; tp = [2, 1], fp = [0, 1], fn = [1, 0]
        let gold = ["a", "a", "a", "b"];
        let pred = ["a", "a", "b", "b"];
        let r = MetricsReport::from_labels(&gold, &pred).unwrap();
        assert_eq!(r.class("a").unwrap().tp, 2);
        assert_eq!(r.class("b").unwrap().fp, 1);
        assert!((r.precision_w - 0.875).abs() < 1e-12);
        assert!((r.recall_w - r.accuracy).abs() < 1e-12);
        assert!((r.accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn metrics_zero_over_zero_is_zero() {
        let r = MetricsReport::from_labels(&["a", "a"], &["b", "b"]).unwrap();
        let b = r.class("b").unwrap();
        assert_eq!(b.n, 0);
        assert_eq!(b.recall, 0.0);
        assert_eq!(r.class("a").unwrap().precision, 0.0);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn embedding_normalization() {
        let e = Embedding::normalized(&[3.0, 4.0]).unwrap();
        assert!(e.is_unit());
        assert!(Embedding::normalized(&[0.0, 0.0]).is_none());
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn entry_id_parse() {
        assert_eq!("e42".parse::<EntryId>().unwrap(), EntryId(42));
        assert_eq!("7".parse::<EntryId>().unwrap(), EntryId(7));
        assert!("x".parse::<EntryId>().is_err());
        assert_eq!(EntryId(3).to_string(), "e3");
    }
}
