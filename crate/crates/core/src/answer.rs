//! From a within-scope message to a cited answer or a refusal.
//!
//! Rewrite, two-path retrieval (QA pairs matched on their question, document
//! chunks on their content), one merged rerank, optional diagnostic context,
//! then a single generation call. The generator may only cite the references
//! it was shown; any other marker turns the reply into a refusal.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::domain::{EntryId, EntryKind, KnowledgeEntry, Message, MessageId, Session};
use crate::gateway::{FieldKind, Gateway, ResponseSchema, StructuredRequest, Turn};
use crate::kb::StoreSnapshot;
use crate::prompts::PromptId;
use crate::scope::dialogue_through;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuestion {
    pub original_message_id: MessageId,
    pub text: String,
    /// The raw text the rewrite started from.
    pub original: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposed: Option<Vec<String>>,
}

impl RewrittenQuestion {
    /// The main question followed by any sub-questions.
    pub fn queries(&self) -> Vec<&str> {
        let mut out = vec![self.text.as_str()];
        for q in self.decomposed.iter().flatten() {
            if !out.contains(&q.as_str()) {
                out.push(q);
            }
        }
        out
    }
}

pub fn rewrite_schema() -> ResponseSchema {
    ResponseSchema::new("rewrite").required("question", FieldKind::String).optional("sub_questions", FieldKind::StringList)
}

/// Rewrites `msg` into a self-contained question.
pub fn rewrite_question(session: &Session, msg: &Message, gateway: &Gateway) -> RewrittenQuestion {
    rewrite_text(session, msg, &msg.text, gateway)
}

/// Rewrites `text` (one message or a joined batch ending at `trigger`).
/// Falls back to the raw text when the model fails.
pub fn rewrite_text(session: &Session, trigger: &Message, text: &str, gateway: &Gateway) -> RewrittenQuestion {
    let raw = RewrittenQuestion {
        original_message_id: trigger.id.clone(),
        text: text.trim().to_string(),
        original: text.to_string(),
        decomposed: None,
    };
    let mut dialogue = dialogue_through(session, trigger.seq);
    dialogue.push(Turn::instruction(format!("# Message to rewrite\n{text}")));
    let req = StructuredRequest { system_prompt: gateway.prompt(PromptId::Rewrite), dialogue, response_schema: rewrite_schema() };
    let reply = match gateway.complete_structured(&req) {
        Ok(r) => r,
        Err(e) => {
            warn!(session = %session.id, error = %e, "rewrite failed, using raw text");
            return raw;
        }
    };
    let question = reply["question"].as_str().unwrap_or("").trim();
    if question.is_empty() {
        return raw;
    }
    let subs: Vec<String> = reply["sub_questions"]
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    RewrittenQuestion { text: question.to_string(), decomposed: (!subs.is_empty()).then_some(subs), ..raw }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalPath {
    QaPath,
    DocPath,
}

impl RetrievalPath {
    pub fn kind(self) -> EntryKind {
        match self {
            Self::QaPath => EntryKind::QAPair,
            Self::DocPath => EntryKind::DocChunk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub entry_id: EntryId,
    pub path: RetrievalPath,
    pub score: f64,
    pub rank_after_rerank: usize,
}

/// Up to `k_per_path` hits per path for the question and each sub-question,
/// merged by entry (best score kept) and ordered by score. The rank field is
/// the position in that order until [`rerank_candidates`] runs.
pub fn retrieve_multipath(q: &RewrittenQuestion, store: &StoreSnapshot, gateway: &Gateway, k_per_path: usize) -> Vec<RetrievalCandidate> {
    let k = k_per_path.max(1);
    let mut best: BTreeMap<EntryId, RetrievalCandidate> = BTreeMap::new();
    if store.is_empty() {
        return Vec::new();
    }
    for query in q.queries() {
        let embedding = match gateway.embed(query) {
            Ok(e) if e.dim() == store.embedding_dim => e,
            Ok(e) => {
                warn!(got = e.dim(), want = store.embedding_dim, "query embedding dimension mismatch");
                continue;
            }
            Err(e) => {
                warn!(error = %e, "query embedding failed");
                continue;
            }
        };
        for path in [RetrievalPath::QaPath, RetrievalPath::DocPath] {
            for hit in store.search_embedding(&embedding, Some(path.kind()), k) {
                let cand = RetrievalCandidate { entry_id: hit.entry_id, path, score: hit.score, rank_after_rerank: 0 };
                best.entry(hit.entry_id)
                    .and_modify(|c| {
                        if hit.score > c.score {
                            c.score = hit.score;
                        }
                    })
                    .or_insert(cand);
            }
        }
    }
    let mut out: Vec<RetrievalCandidate> = best.into_values().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
    for (i, c) in out.iter_mut().enumerate() {
        c.rank_after_rerank = i;
    }
    out
}

/// Text a reranker or generator sees for one entry.
pub fn reference_text(entry: &KnowledgeEntry) -> String {
    match entry.kind {
        EntryKind::QAPair => format!("Question: {}\nAnswer: {}", entry.question, entry.content),
        EntryKind::DocChunk => entry.content.clone(),
    }
}

/// Reranks the merged pool and keeps the best `cap`. Falls back to cosine
/// order when the reranker fails.
pub fn rerank_candidates(
    q: &RewrittenQuestion,
    candidates: Vec<RetrievalCandidate>,
    store: &StoreSnapshot,
    gateway: &Gateway,
    cap: usize,
) -> Vec<RetrievalCandidate> {
    let candidates: Vec<RetrievalCandidate> = candidates.into_iter().filter(|c| store.get(c.entry_id).is_some()).collect();
    if candidates.is_empty() {
        return candidates;
    }
    let texts: Vec<String> = candidates.iter().map(|c| reference_text(store.get(c.entry_id).expect("filtered"))).collect();
    let order = gateway.rerank(&q.text, &texts).unwrap_or_else(|e| {
        warn!(error = %e, "rerank failed, keeping retrieval order");
        (0..candidates.len()).collect()
    });
    let mut out: Vec<RetrievalCandidate> = order.into_iter().map(|i| candidates[i].clone()).collect();
    for (i, c) in out.iter_mut().enumerate() {
        c.rank_after_rerank = i;
    }
    out.truncate(cap.max(1));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticContext {
    pub tool_name: String,
    pub payload: String,
}

/// A probe that may add operational context (logs, alerts) for a question.
pub trait DiagnosticTool: Send + Sync {
    fn name(&self) -> &str;
    /// `Ok(None)` when the tool does not apply.
    fn probe(&self, question: &RewrittenQuestion) -> Result<Option<String>, String>;
}

/// Fixture-backed tool: the first keyword found in the question selects its payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureTool {
    pub name: String,
    pub mappings: Vec<FixtureMapping>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureMapping {
    pub keyword: String,
    pub payload: String,
}

impl FixtureTool {
    pub fn load(path: &Path) -> Result<Vec<FixtureTool>, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl DiagnosticTool for FixtureTool {
    fn name(&self) -> &str {
        &self.name
    }

    fn probe(&self, question: &RewrittenQuestion) -> Result<Option<String>, String> {
        let hay = format!("{}\n{}", question.text, question.original).to_lowercase();
        Ok(self.mappings.iter().find(|m| hay.contains(&m.keyword.to_lowercase())).map(|m| m.payload.clone()))
    }
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<Arc<dyn DiagnosticTool>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.iter().map(|t| t.name().to_string())).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Arc<dyn DiagnosticTool>) {
        self.tools.push(tool);
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

/// A tool that failed or panicked; reported for the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolFailure {
    pub tool_name: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolRun {
    pub contexts: Vec<DiagnosticContext>,
    pub failures: Vec<ToolFailure>,
}

pub fn run_diagnostic_tools(q: &RewrittenQuestion, registry: &ToolRegistry) -> ToolRun {
    let mut run = ToolRun::default();
    for tool in &registry.tools {
        let outcome = catch_unwind(AssertUnwindSafe(|| tool.probe(q)));
        let error = match outcome {
            Ok(Ok(Some(payload))) => {
                run.contexts.push(DiagnosticContext { tool_name: tool.name().to_string(), payload });
                continue;
            }
            Ok(Ok(None)) => continue,
            Ok(Err(e)) => e,
            Err(panic) => panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "tool panicked".into()),
        };
        warn!(tool = tool.name(), %error, "diagnostic tool failed");
        run.failures.push(ToolFailure { tool_name: tool.name().to_string(), error });
    }
    run
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GenerationOutcome {
    Answer { text: String, citations: Vec<EntryId> },
    Refusal,
}

pub const REFUSAL: &str = "Unable to answer";

pub fn answer_schema() -> ResponseSchema {
    ResponseSchema::new("answer").required("answer", FieldKind::String).optional("citations", FieldKind::IntegerList)
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<doc_(\d+)>").expect("static regex"))
}

/// Removes inline `<doc_n>` markers.
pub fn strip_markers(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*<doc_\d+>").expect("static regex"));
    re.replace_all(text, "").trim().to_string()
}

fn is_refusal(text: &str) -> bool {
    let t = text.trim().trim_end_matches('.').trim();
    t.is_empty() || t.eq_ignore_ascii_case(REFUSAL)
}

/// The final instruction turn handed to the generator.
pub fn generation_instruction(q: &RewrittenQuestion, references: &[&KnowledgeEntry], diagnostics: &[DiagnosticContext]) -> String {
    let mut out = String::from("# References\n");
    for (i, e) in references.iter().enumerate() {
        out.push_str(&format!("<doc_{n}>{}</doc_{n}>\n", reference_text(e), n = i + 1));
    }
    if !diagnostics.is_empty() {
        out.push_str("# Diagnostics\n");
        for d in diagnostics {
            out.push_str(&format!("[{}] {}\n", d.tool_name, d.payload));
        }
    }
    out.push_str("# Current question\n");
    out.push_str(&q.text);
    out
}

/// One generation call over the reranked references. Every doc number in
/// the reply must name a presented reference; otherwise, and on any model
/// failure or explicit refusal, the outcome is [`GenerationOutcome::Refusal`].
pub fn generate_answer(
    session: &Session,
    trigger: &Message,
    q: &RewrittenQuestion,
    candidates: &[RetrievalCandidate],
    store: &StoreSnapshot,
    diagnostics: &[DiagnosticContext],
    gateway: &Gateway,
) -> GenerationOutcome {
    let references: Vec<&KnowledgeEntry> = candidates.iter().filter_map(|c| store.get(c.entry_id)).collect();
    if references.is_empty() && diagnostics.is_empty() {
        return GenerationOutcome::Refusal;
    }
    let mut dialogue = dialogue_through(session, trigger.seq);
    dialogue.push(Turn::instruction(generation_instruction(q, &references, diagnostics)));
    let req = StructuredRequest { system_prompt: gateway.prompt(PromptId::Generate), dialogue, response_schema: answer_schema() };
    let reply = match gateway.complete_structured(&req) {
        Ok(r) => r,
        Err(e) => {
            warn!(session = %session.id, error = %e, "generation failed, refusing");
            return GenerationOutcome::Refusal;
        }
    };
    let text = reply["answer"].as_str().unwrap_or("").trim().to_string();
    if is_refusal(&text) {
        return GenerationOutcome::Refusal;
    }
    let mut numbers: Vec<u64> = marker_regex().captures_iter(&text).filter_map(|c| c[1].parse().ok()).collect();
    numbers.extend(reply["citations"].as_array().into_iter().flatten().filter_map(Value::as_u64));
    let mut seen = BTreeSet::new();
    let mut citations = Vec::new();
    for n in numbers {
        let Some(entry) = (n as usize).checked_sub(1).and_then(|i| references.get(i)) else {
            warn!(session = %session.id, doc = n, "answer cites a reference it was not given, refusing");
            return GenerationOutcome::Refusal;
        };
        if seen.insert(entry.id) {
            citations.push(entry.id);
        }
    }
    GenerationOutcome::Answer { text, citations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AuthorRole, EntryStatus, Provenance, SessionId};
    use crate::gateway::{Conditions, ScriptRule, ScriptRules};
    use crate::kb::{KnowledgeStore, MutationCause, StoreConfig};
    use serde_json::json;

    const DIM: usize = 128;

    fn session(texts: &[(AuthorRole, &str)]) -> Session {
        let sid = SessionId::from("s");
        let mut s = Session::new(sid.clone());
        for (i, (r, t)) in texts.iter().enumerate() {
            s.append_message(Message::new(format!("m{}", i + 1), sid.clone(), *r, *t)).unwrap();
        }
        s
    }

    fn rewrite_rules() -> ScriptRules {
        ScriptRules {
            rules: vec![
                ScriptRule::new(
                    "rewrite",
                    Conditions {
                        dialogue_contains: vec!["bucket b-123".into()],
                        section_contains: BTreeMap::from([("Message to rewrite".into(), vec!["why is it".into()])]),
                        ..Default::default()
                    },
                    json!({"question": "Why is bucket b-123 returning 403 errors?"}),
                ),
                ScriptRule::new(
                    "rewrite",
                    Conditions {
                        section_contains: BTreeMap::from([("Message to rewrite".into(), vec![" and ".into(), "?".into()])]),
                        ..Default::default()
                    },
                    json!({"question": "{{section:Message to rewrite}}",
                           "sub_questions": ["How do I enable versioning?", "How do I set a lifecycle rule?"]}),
                ),
            ],
            defaults: BTreeMap::from([("rewrite".into(), json!({"question": "{{section:Message to rewrite}}"}))]),
        }
    }

    #[test]
    fn rewrite_examples() {
        let gw = Gateway::scripted(rewrite_rules(), DIM);
        let s = session(&[
            (AuthorRole::Customer, "my bucket b-123 is acting up"),
            (AuthorRole::Analyst, "which error?"),
            (AuthorRole::Customer, "why is it returning 403?"),
        ]);
        let q = rewrite_question(&s, &s.messages[2], &gw);
        assert_eq!(q.text, "Why is bucket b-123 returning 403 errors?");
        assert!(!q.text.contains(" it "));
        assert_eq!(q.original, "why is it returning 403?");

        let s = session(&[(AuthorRole::Customer, "How do I restart an ECS instance?")]);
        assert_eq!(rewrite_question(&s, &s.messages[0], &gw).text, "How do I restart an ECS instance?");

        let s = session(&[(AuthorRole::Customer, "How do I enable versioning and set a lifecycle rule?")]);
        assert_eq!(rewrite_question(&s, &s.messages[0], &gw).decomposed.unwrap().len(), 2);
    }

    #[test]
    fn rewrite_failure_falls_back_to_raw() {
        let gw = Gateway::scripted(ScriptRules::default(), DIM);
        let s = session(&[(AuthorRole::Customer, "why is it slow?")]);
        let q = rewrite_question(&s, &s.messages[0], &gw);
        assert_eq!(q.text, "why is it slow?");
    }

    fn store_with(qas: &[(&str, &str)], docs: &[&str]) -> KnowledgeStore {
        let gw = Gateway::scripted(ScriptRules::default(), DIM);
        let s = KnowledgeStore::in_memory(DIM, StoreConfig::default());
        for (q, a) in qas {
            s.insert_qa(&gw, q, a, Provenance::ManualSeed, EntryStatus::Validated, MutationCause::ManualSeed, None).unwrap();
        }
        for (i, d) in docs.iter().enumerate() {
            let url = format!("https://docs.example.com/{i}");
            s.ingest_document(&gw, &url, d, MutationCause::DocIngestion { url: url.clone(), session_id: None }, None).unwrap();
        }
        s
    }

    fn rq(text: &str) -> RewrittenQuestion {
        RewrittenQuestion { original_message_id: MessageId::from("m1"), text: text.into(), original: text.into(), decomposed: None }
    }

    #[test]
    fn retrieval_examples() {
        let gw = Gateway::scripted(ScriptRules::default(), DIM);
        let empty = store_with(&[], &[]);
        assert!(retrieve_multipath(&rq("anything"), &empty.view(), &gw, 5).is_empty());

        let s = store_with(&[("how to resize a disk", "use the console")], &["Disk resizing guide for block storage."]);
        let c = retrieve_multipath(&rq("resize disk"), &s.view(), &gw, 5);
        assert_eq!(c.len(), 2);
        assert!(c.iter().any(|c| c.path == RetrievalPath::QaPath));
        assert!(c.iter().any(|c| c.path == RetrievalPath::DocPath));
    }

    #[test]
    fn top_k_matches_linear_scan() {
        let gw = Gateway::scripted(ScriptRules::default(), DIM);
        let qs: Vec<String> = (0..10).map(|i| format!("question number {i} about topic {}", i % 3)).collect();
        let pairs: Vec<(&str, &str)> = qs.iter().map(|q| (q.as_str(), "answer")).collect();
        let s = store_with(&pairs, &[]);
        let view = s.view();
        let query = "question about topic 1";
        let got: Vec<EntryId> = retrieve_multipath(&rq(query), &view, &gw, 3).iter().map(|c| c.entry_id).collect();
        // exhaustive oracle
        let qe = gw.embed(query).unwrap();
        let mut all: Vec<(f64, EntryId)> = view
            .entries
            .values()
            .map(|e| (qe.as_slice().iter().zip(e.embedding.as_slice()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum(), e.id))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<EntryId> = all.iter().take(3).map(|x| x.1).collect();
        assert_eq!(got, want);
    }

    struct Failing;
    impl DiagnosticTool for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn probe(&self, _: &RewrittenQuestion) -> Result<Option<String>, String> {
            panic!("probe exploded")
        }
    }

    #[test]
    fn tool_examples() {
        let q = rq("my instance i-42 keeps rebooting");
        assert!(run_diagnostic_tools(&q, &ToolRegistry::new()).contexts.is_empty());

        let mut reg = ToolRegistry::new();
        reg.register(Arc::new(FixtureTool {
            name: "ecs-logs".into(),
            mappings: vec![FixtureMapping { keyword: "instance i-42".into(), payload: "kernel panic at 02:13".into() }],
        }));
        let run = run_diagnostic_tools(&q, &reg);
        assert_eq!(run.contexts, vec![DiagnosticContext { tool_name: "ecs-logs".into(), payload: "kernel panic at 02:13".into() }]);

        let mut reg = ToolRegistry::new();
        reg.register(Arc::new(Failing));
        let run = run_diagnostic_tools(&q, &reg);
        assert!(run.contexts.is_empty());
        assert_eq!(run.failures.len(), 1);
        assert!(run.failures[0].error.contains("exploded"));
    }

    fn generation_rules() -> ScriptRules {
        ScriptRules {
            rules: vec![
                ScriptRule::new(
                    "answer",
                    Conditions {
                        reference_contains: vec!["sdk v1".into()],
                        section_contains: BTreeMap::from([("Current question".into(), vec!["sdk v2".into()])]),
                        ..Default::default()
                    },
                    json!({"answer": "Unable to answer"}),
                ),
                ScriptRule::new(
                    "answer",
                    Conditions { reference_contains: vec!["lifecycle".into()], ..Default::default() },
                    json!({"answer": "{{ref_answer_containing:lifecycle}} <doc_{{ref_containing:lifecycle}}>"}),
                ),
                ScriptRule::new(
                    "answer",
                    Conditions {
                        section_contains: BTreeMap::from([("Current question".into(), vec!["fabricate".into()])]),
                        ..Default::default()
                    },
                    json!({"answer": "see <doc_9>"}),
                ),
            ],
            defaults: BTreeMap::from([("answer".into(), json!({"answer": "Unable to answer"}))]),
        }
    }

    fn run(store: &KnowledgeStore, question: &str) -> GenerationOutcome {
        let gw = Gateway::scripted(generation_rules(), DIM);
        let s = session(&[(AuthorRole::Analyst, "hi"), (AuthorRole::Customer, question)]);
        let q = rq(question);
        let view = store.view();
        let cands = rerank_candidates(&q, retrieve_multipath(&q, &view, &gw, 5), &view, &gw, 6);
        generate_answer(&s, &s.messages[1], &q, &cands, &view, &[], &gw)
    }

    #[test]
    fn generation_examples() {
        let empty = store_with(&[], &[]);
        assert_eq!(run(&empty, "how do I set a lifecycle rule?"), GenerationOutcome::Refusal);

        let s = store_with(&[("How do I set a lifecycle rule?", "Add a lifecycle rule under bucket settings.")], &[]);
        match run(&s, "How do I set a lifecycle rule?") {
            GenerationOutcome::Answer { text, citations } => {
                assert!(text.contains("<doc_1>"));
                assert_eq!(citations, vec![s.view().entries.keys().next().copied().unwrap()]);
            }
            other => panic!("{other:?}"),
        }

        let s = store_with(&[("upload fails with SDK v1", "upgrade to SDK v1.4")], &[]);
        assert_eq!(run(&s, "upload fails with SDK v2"), GenerationOutcome::Refusal);
    }

    #[test]
    fn fabricated_citation_is_refused() {
        let s = store_with(&[("fabricate a reference", "no")], &[]);
        assert_eq!(run(&s, "please fabricate a reference"), GenerationOutcome::Refusal);
    }

    #[test]
    fn markers_strip_cleanly() {
        assert_eq!(strip_markers("Use a reserved host <doc_1><doc_2>. Then retry."), "Use a reserved host. Then retry.");
    }
}
