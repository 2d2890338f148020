//! Deterministic, rule-table driven model backend for offline runs.
//!
//! Completions are a pure function of the request: the first rule whose task
//! and `when` conditions match produces the reply, falling back to the
//! per-task default. String values in replies may use placeholders:
//!
//! | placeholder                     | expands to                                        |
//! |---------------------------------|---------------------------------------------------|
//! | `{{last}}`                      | text of the final turn                            |
//! | `{{section:NAME}}`              | body of `# NAME` in the final turn                |
//! | `{{role:analyst}}`              | text of the latest turn by that role              |
//! | `{{ref:N}}`                     | inner text of `<doc_N>`                           |
//! | `{{ref_answer:N}}`              | text after `Answer:` inside `<doc_N>`             |
//! | `{{ref_containing:TEXT}}`       | number of the first reference containing TEXT     |
//! | `{{ref_answer_containing:TEXT}}`| answer part of that reference                     |
//!
//! A string consisting of exactly one placeholder that expands to an integer
//! becomes a JSON number. A rule whose placeholders cannot be resolved does
//! not match.
//!
//! Embeddings hash lower-cased character trigrams and words into
//! `embedding_dim` buckets (FNV-1a, fixed seed) plus one start-of-text bucket
//! shared by every input, so cosine similarities are strictly positive and
//! grow with n-gram overlap. Reranking orders candidates by the number of
//! distinct query words they contain, ties kept in input order.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ModelBackend, StructuredRequest, Turn, TurnRole};
use crate::error::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Timeout,
    Unavailable,
    /// Replies with free text, which the gateway must reject.
    Malformed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Conditions {
    /// Every string occurs in the final turn.
    pub last_contains: Vec<String>,
    /// At least one string occurs in the final turn.
    pub last_contains_any: Vec<String>,
    pub last_lacks: Vec<String>,
    /// Every string occurs somewhere in the dialogue.
    pub dialogue_contains: Vec<String>,
    pub dialogue_lacks: Vec<String>,
    pub section_contains: BTreeMap<String, Vec<String>>,
    pub section_lacks: BTreeMap<String, Vec<String>>,
    /// Some single reference contains every string.
    pub reference_contains: Vec<String>,
    /// No reference contains any of these strings.
    pub references_lack: Vec<String>,
    pub no_references: Option<bool>,
    /// Minimum share of the current question's words found in `<doc_1>`.
    pub top_reference_overlap: Option<f64>,
    /// Each listed string occurs in some turn by that role.
    pub role_contains: BTreeMap<String, Vec<String>>,
    pub attachment: Option<String>,
    /// No conversational turns (instruction turns do not count).
    pub empty_dialogue: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Response schema name the rule applies to; any task when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default)]
    pub when: Conditions,
    #[serde(default)]
    pub reply: Value,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<Failure>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ScriptRule {
    pub fn new(task: &str, when: Conditions, reply: Value) -> Self {
        Self { name: None, task: Some(task.into()), when, reply, delay_ms: 0, fail: None }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRules {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub defaults: BTreeMap<String, Value>,
}

impl ScriptRules {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Rules from `self` take precedence over `other`; defaults likewise.
    pub fn merged_with(mut self, other: ScriptRules) -> Self {
        self.rules.extend(other.rules);
        for (k, v) in other.defaults {
            self.defaults.entry(k).or_insert(v);
        }
        self
    }

    /// General-purpose rules used when no fixture is configured.
    pub fn builtin() -> Self {
        let phatic = ["thank", "great, ", "got it", "hello", "bye", "ok "];
        let subjective = ["should we", "should our", "should i choose", "which vendor", "competitor", "is it worth"];
        let question = ["?", "how do i", "how to", "error", "fail", "cannot", "can't", "unable"];
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let rules = vec![
            ScriptRule::new(
                "scope_classification",
                Conditions { last_contains_any: strings(&subjective), ..Default::default() },
                json!({"class": "Out of Scope"}),
            ),
            ScriptRule::new(
                "scope_classification",
                Conditions { last_contains_any: strings(&phatic), last_lacks: strings(&["?"]), ..Default::default() },
                json!({"class": "No assistance needed"}),
            ),
            ScriptRule::new(
                "scope_classification",
                Conditions { last_contains_any: strings(&question), ..Default::default() },
                json!({"class": "Within Scope"}),
            ),
            ScriptRule::new(
                "answer",
                Conditions { no_references: Some(false), top_reference_overlap: Some(0.5), ..Default::default() },
                json!({"answer": "{{ref_answer:1}} <doc_1>", "citations": [1]}),
            ),
        ];
        let defaults = BTreeMap::from([
            ("scope_classification".to_string(), json!({"class": "No assistance needed"})),
            ("already_answered".to_string(), json!({"already_answered": false})),
            ("rewrite".to_string(), json!({"question": "{{section:Message to rewrite}}"})),
            ("answer".to_string(), json!({"answer": "Unable to answer"})),
            ("review".to_string(), json!({"action": "Keep"})),
            ("extraction".to_string(), json!({"found": false})),
            ("judge".to_string(), json!({"verdict": "Incorrect"})),
        ]);
        Self { rules, defaults }
    }
}

/// Everything a rule may look at, precomputed once per request.
struct RequestView<'a> {
    turns: &'a [Turn],
    last: &'a str,
    last_lower: String,
    all_lower: Vec<String>,
    sections: Vec<(String, String)>,
    references: Vec<(usize, String)>,
}

fn doc_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<doc_(\d+)>(.*?)</doc_\d+>").expect("static regex"))
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([^{}]+)\}\}").expect("static regex"))
}

/// `# Name` headed sections of an instruction turn.
pub(crate) fn parse_sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("# ") {
            out.push((name.trim().to_string(), Vec::new()));
        } else if let Some((_, body)) = out.last_mut() {
            body.push(line);
        }
    }
    out.into_iter().map(|(n, b)| (n, b.join("\n").trim().to_string())).collect()
}

fn answer_part(reference: &str) -> &str {
    match reference.rfind("Answer:") {
        Some(i) => reference[i + "Answer:".len()..].trim(),
        None => reference.trim(),
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

impl<'a> RequestView<'a> {
    fn new(req: &'a StructuredRequest) -> Self {
        let turns = req.dialogue.as_slice();
        let last = turns.last().map_or("", |t| t.text.as_str());
        let references = doc_regex().captures_iter(last).filter_map(|c| Some((c[1].parse().ok()?, c[2].trim().to_string()))).collect();
        Self {
            turns,
            last,
            last_lower: last.to_lowercase(),
            all_lower: turns.iter().map(|t| t.text.to_lowercase()).collect(),
            sections: parse_sections(last),
            references,
        }
    }

    fn section(&self, name: &str) -> Option<&str> {
        self.sections.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, b)| b.as_str())
    }

    fn reference(&self, n: usize) -> Option<&str> {
        self.references.iter().find(|(i, _)| *i == n).map(|(_, t)| t.as_str())
    }

    fn reference_containing(&self, needle: &str) -> Option<(usize, &str)> {
        let needle = needle.to_lowercase();
        self.references.iter().find(|(_, t)| t.to_lowercase().contains(&needle)).map(|(i, t)| (*i, t.as_str()))
    }

    fn role_turns(&self, role: &str) -> impl Iterator<Item = &Turn> {
        let role = role.to_lowercase();
        self.turns.iter().filter(move |t| t.role.as_str() == role)
    }

    fn question_text(&self) -> &str {
        self.section("Current question").unwrap_or(self.last)
    }

    fn matches(&self, c: &Conditions) -> bool {
        let lower = |s: &String| s.to_lowercase();
        let in_last = |s: &String| self.last_lower.contains(&lower(s));
        let in_dialogue = |s: &String| self.all_lower.iter().any(|t| t.contains(&lower(s)));
        let section_has = |name: &str, s: &String| self.section(name).is_some_and(|b| b.to_lowercase().contains(&lower(s)));
        if !c.last_contains.iter().all(in_last)
            || (!c.last_contains_any.is_empty() && !c.last_contains_any.iter().any(in_last))
            || c.last_lacks.iter().any(in_last)
            || !c.dialogue_contains.iter().all(in_dialogue)
            || c.dialogue_lacks.iter().any(in_dialogue)
        {
            return false;
        }
        for (name, needles) in &c.section_contains {
            if !needles.iter().all(|s| section_has(name, s)) {
                return false;
            }
        }
        for (name, needles) in &c.section_lacks {
            if needles.iter().any(|s| section_has(name, s)) {
                return false;
            }
        }
        if !c.reference_contains.is_empty() {
            let hit = self.references.iter().any(|(_, t)| {
                let t = t.to_lowercase();
                c.reference_contains.iter().all(|s| t.contains(&lower(s)))
            });
            if !hit {
                return false;
            }
        }
        if c.references_lack.iter().any(|s| {
            let s = lower(s);
            self.references.iter().any(|(_, t)| t.to_lowercase().contains(&s))
        }) {
            return false;
        }
        if let Some(want_none) = c.no_references {
            if want_none != self.references.is_empty() {
                return false;
            }
        }
        if let Some(min) = c.top_reference_overlap {
            let Some(top) = self.reference(1) else { return false };
            let q: HashSet<String> = words(self.question_text()).into_iter().filter(|w| w.len() >= 3).collect();
            let r: HashSet<String> = words(top).into_iter().collect();
            if q.is_empty() || (q.intersection(&r).count() as f64) < min * q.len() as f64 {
                return false;
            }
        }
        for (role, needles) in &c.role_contains {
            let ok = needles.iter().all(|s| {
                let s = lower(s);
                self.role_turns(role).any(|t| t.text.to_lowercase().contains(&s))
            });
            if !ok {
                return false;
            }
        }
        if let Some(name) = &c.attachment {
            let name = lower(name);
            if !self.turns.iter().flat_map(|t| &t.attachments).any(|a| a.to_lowercase().contains(&name)) {
                return false;
            }
        }
        if let Some(want_empty) = c.empty_dialogue {
            let empty = self.turns.iter().all(|t| t.role == TurnRole::Instruction);
            if want_empty != empty {
                return false;
            }
        }
        true
    }

    fn resolve(&self, var: &str) -> Option<Value> {
        let (name, arg) = var.split_once(':').map_or((var, ""), |(n, a)| (n, a));
        let text = |s: &str| Some(Value::String(s.to_string()));
        match name.trim() {
            "last" => text(self.last),
            "section" => self.section(arg).and_then(text),
            "role" => self.role_turns(arg).last().and_then(|t| text(&t.text)),
            "ref" => self.reference(arg.parse().ok()?).and_then(text),
            "ref_answer" => self.reference(arg.parse().ok()?).map(answer_part).and_then(text),
            "ref_containing" => self.reference_containing(arg).map(|(i, _)| json!(i)),
            "ref_answer_containing" => self.reference_containing(arg).map(|(_, t)| answer_part(t)).and_then(text),
            _ => None,
        }
    }

    fn expand(&self, template: &Value) -> Option<Value> {
        match template {
            Value::String(s) => {
                let re = placeholder_regex();
                if let Some(m) = re.captures(s).filter(|m| m.get(0).is_some_and(|g| g.as_str() == s)) {
                    return self.resolve(&m[1]);
                }
                let mut out = String::with_capacity(s.len());
                let mut last = 0;
                for m in re.captures_iter(s) {
                    let whole = m.get(0)?;
                    out.push_str(&s[last..whole.start()]);
                    match self.resolve(&m[1])? {
                        Value::String(v) => out.push_str(&v),
                        other => out.push_str(&other.to_string()),
                    }
                    last = whole.end();
                }
                out.push_str(&s[last..]);
                Some(Value::String(out))
            }
            Value::Array(items) => items.iter().map(|v| self.expand(v)).collect::<Option<Vec<_>>>().map(Value::Array),
            Value::Object(map) => {
                let mut out = serde_json::Map::new();
                for (k, v) in map {
                    out.insert(k.clone(), self.expand(v)?);
                }
                Some(Value::Object(out))
            }
            other => Some(other.clone()),
        }
    }
}

const HASH_SEED: u64 = 0x5eed_0ca1_1ab5_2025;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ HASH_SEED;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Feature-hashed bag of character trigrams and words, not normalized.
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0f32; dim];
    if dim == 0 {
        return v;
    }
    let mut bump = |feature: &[u8]| {
        v[(fnv1a(feature) % dim as u64) as usize] += 1.0;
    };
    bump(b"\x02");
    let lower = text.to_lowercase();
    let padded: Vec<char> = std::iter::once(' ').chain(lower.chars()).chain(std::iter::once(' ')).collect();
    let mut buf = String::new();
    for w in padded.windows(3) {
        buf.clear();
        buf.push('t');
        buf.extend(w);
        bump(buf.as_bytes());
    }
    for word in words(&lower) {
        buf.clear();
        buf.push('w');
        buf.push_str(&word);
        bump(buf.as_bytes());
    }
    v
}

/// Candidate indices ordered by distinct query-word overlap, best first.
pub fn overlap_rerank(query: &str, candidates: &[String]) -> Vec<usize> {
    let q: HashSet<String> = words(query).into_iter().collect();
    let mut scored: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let c: HashSet<String> = words(c).into_iter().collect();
            (i, q.intersection(&c).count())
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

pub struct ScriptedBackend {
    rules: ScriptRules,
    dim: usize,
}

impl ScriptedBackend {
    pub fn new(rules: ScriptRules, dim: usize) -> Self {
        Self { rules, dim }
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, req: &StructuredRequest, timeout: Duration) -> Result<Value, GatewayError> {
        let view = RequestView::new(req);
        let budget_ms = timeout.as_millis() as u64;
        for rule in &self.rules.rules {
            if rule.task.as_deref().is_some_and(|t| t != req.task()) || !view.matches(&rule.when) {
                continue;
            }
            if rule.delay_ms > 0 {
                let stall = Duration::from_millis(rule.delay_ms);
                if stall >= timeout {
                    thread::sleep(timeout);
                    return Err(GatewayError::Timeout { budget_ms });
                }
                thread::sleep(stall);
            }
            match rule.fail {
                Some(Failure::Timeout) => return Err(GatewayError::Timeout { budget_ms }),
                Some(Failure::Unavailable) => return Err(GatewayError::RemoteUnavailable("scripted outage".into())),
                Some(Failure::Malformed) => return Ok(Value::String("I think the answer is yes.".into())),
                None => {}
            }
            if let Some(reply) = view.expand(&rule.reply) {
                return Ok(reply);
            }
        }
        let Some(default) = self.rules.defaults.get(req.task()) else {
            return Err(GatewayError::SchemaViolation(format!("no scripted reply for task `{}`", req.task())));
        };
        view.expand(default).ok_or_else(|| GatewayError::SchemaViolation(format!("default for `{}` did not resolve", req.task())))
    }

    fn embed(&self, text: &str, _timeout: Duration) -> Result<Vec<f32>, GatewayError> {
        Ok(hashed_embedding(text, self.dim))
    }

    fn rerank(&self, query: &str, candidates: &[String], _timeout: Duration) -> Result<Vec<usize>, GatewayError> {
        Ok(overlap_rerank(query, candidates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FieldKind, Gateway, ResponseSchema};
    use proptest::prelude::*;

    fn cosine(a: &crate::domain::Embedding, b: &crate::domain::Embedding) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    fn classify_request(text: &str) -> StructuredRequest {
        StructuredRequest {
            system_prompt: "identify".into(),
            dialogue: vec![
                Turn { role: TurnRole::Customer, text: text.into(), attachments: vec![] },
                Turn::instruction(format!("# Newly added messages\n{text}")),
            ],
            response_schema: ResponseSchema::new("scope_classification")
                .required("class", FieldKind::Enum(vec!["Within Scope".into(), "Out of Scope".into(), "No assistance needed".into()])),
        }
    }

    #[test]
    fn phatic_rule_fires() {
        let rules = ScriptRules {
            rules: vec![ScriptRule::new(
                "scope_classification",
                Conditions { last_contains: vec!["thanks".into()], ..Default::default() },
                json!({"class": "No assistance needed"}),
            )],
            defaults: BTreeMap::new(),
        };
        let gw = Gateway::scripted(rules, 16);
        let reply = gw.complete_structured(&classify_request("thanks, that worked!")).unwrap();
        assert_eq!(reply, json!({"class": "No assistance needed"}));
    }

    #[test]
    fn empty_dialogue_without_default_is_schema_violation() {
        let gw = Gateway::scripted(ScriptRules::default(), 16);
        let mut req = classify_request("x");
        req.dialogue.clear();
        assert!(matches!(gw.complete_structured(&req), Err(GatewayError::SchemaViolation(_))));
        let gw = Gateway::scripted(ScriptRules::builtin(), 16);
        assert_eq!(gw.complete_structured(&req).unwrap(), json!({"class": "No assistance needed"}));
    }

    #[test]
    fn replies_are_byte_identical() {
        let gw = Gateway::scripted(ScriptRules::builtin(), 16);
        let req = classify_request("how do I set a lifecycle rule on my bucket?");
        let a = serde_json::to_vec(&gw.complete_structured(&req).unwrap()).unwrap();
        let b = serde_json::to_vec(&gw.complete_structured(&req).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn builtin_classes() {
        let gw = Gateway::scripted(ScriptRules::builtin(), 16);
        let class = |t: &str| gw.complete_structured(&classify_request(t)).unwrap()["class"].clone();
        assert_eq!(class("thanks, that worked!"), json!("No assistance needed"));
        assert_eq!(class("how do I set a lifecycle rule on my storage bucket?"), json!("Within Scope"));
        assert_eq!(class("should our company migrate off your competitor?"), json!("Out of Scope"));
    }

    #[test]
    fn templates_resolve_references() {
        let rules = ScriptRules {
            rules: vec![ScriptRule::new(
                "answer",
                Conditions { reference_contains: vec!["reserved host".into()], ..Default::default() },
                json!({"answer": "{{ref_answer_containing:reserved host}} <doc_{{ref_containing:reserved host}}>",
                       "citations": ["{{ref_containing:reserved host}}"]}),
            )],
            defaults: BTreeMap::from([("answer".to_string(), json!({"answer": "Unable to answer"}))]),
        };
        let backend = ScriptedBackend::new(rules, 8);
        let req = StructuredRequest {
            system_prompt: "a".into(),
            dialogue: vec![Turn::instruction(
                "# References\n<doc_1>Question: dns\nAnswer: flush cache</doc_1>\n<doc_2>Question: evac\nAnswer: migrate to a reserved host</doc_2>\n# Current question\nhow?",
            )],
            response_schema: ResponseSchema::new("answer").required("answer", FieldKind::String),
        };
        let reply = backend.complete(&req, Duration::from_secs(1)).unwrap();
        assert_eq!(reply, json!({"answer": "migrate to a reserved host <doc_2>", "citations": [2]}));
    }

    #[test]
    fn unresolved_placeholder_falls_through() {
        let rules = ScriptRules {
            rules: vec![ScriptRule::new("answer", Conditions::default(), json!({"answer": "{{ref:1}}"}))],
            defaults: BTreeMap::from([("answer".to_string(), json!({"answer": "Unable to answer"}))]),
        };
        let backend = ScriptedBackend::new(rules, 8);
        let req = StructuredRequest {
            system_prompt: "a".into(),
            dialogue: vec![Turn::instruction("# Current question\nq")],
            response_schema: ResponseSchema::new("answer").required("answer", FieldKind::String),
        };
        assert_eq!(backend.complete(&req, Duration::from_secs(1)).unwrap(), json!({"answer": "Unable to answer"}));
    }

    #[test]
    fn stalled_rule_times_out_within_budget() {
        let rules = ScriptRules {
            rules: vec![ScriptRule {
                delay_ms: 5_000,
                ..ScriptRule::new("scope_classification", Conditions::default(), json!({"class": "Within Scope"}))
            }],
            defaults: BTreeMap::new(),
        };
        let gw = Gateway::scripted(rules, 8).with_timeout_ms(100);
        let start = std::time::Instant::now();
        let err = gw.complete_structured(&classify_request("x")).unwrap_err();
        assert!(matches!(err, GatewayError::Timeout { .. }));
        assert!(start.elapsed() < Duration::from_millis(100 + 150));
    }

    #[test]
    fn embedding_is_unit_and_self_similar() {
        let gw = Gateway::scripted(ScriptRules::default(), 8);
        let v = gw.embed("abc").unwrap();
        assert_eq!(v.dim(), 8);
        assert!((v.norm() - 1.0).abs() < 1e-6);
        let s = gw.embed("restart the VM").unwrap();
        assert!((cosine(&s, &gw.embed("restart the VM").unwrap()) - 1.0).abs() < 1e-6);
    }

    /// Brute-force oracle: shared distinct lower-cased trigrams and words.
    fn ngram_overlap(a: &str, b: &str) -> usize {
        let grams = |s: &str| {
            let chars: Vec<char> = format!(" {} ", s.to_lowercase()).chars().collect();
            let mut set: HashSet<String> = chars.windows(3).map(|w| w.iter().collect()).collect();
            set.extend(words(s).into_iter().map(|w| format!("#{w}")));
            set
        };
        grams(a).intersection(&grams(b)).count()
    }

    #[test]
    fn similar_strings_score_higher() {
        let (a, b, c) = ("restart the VM", "restart the vm", "DNS lookup fails");
        assert!(ngram_overlap(a, b) > ngram_overlap(a, c));
        let gw = Gateway::scripted(ScriptRules::default(), 256);
        let (ea, eb, ec) = (gw.embed(a).unwrap(), gw.embed(b).unwrap(), gw.embed(c).unwrap());
        assert!(cosine(&ea, &eb) > cosine(&ea, &ec));
        assert!(cosine(&ea, &ec) > 0.0);
    }

    #[test]
    fn rerank_examples() {
        assert_eq!(overlap_rerank("q", &["only".into()]), vec![0]);
        assert_eq!(overlap_rerank("bucket ACL", &["DNS guide".into(), "bucket ACL how-to".into()]), vec![1, 0]);
        assert_eq!(overlap_rerank("x y", &["same".into(), "same".into(), "same".into()]), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn rerank_is_permutation(query in "[a-z ]{0,20}", cands in proptest::collection::vec("[a-z ]{0,20}", 1..12)) {
            let gw = Gateway::scripted(ScriptRules::default(), 8);
            let mut order = gw.rerank(&query, &cands).unwrap();
            order.sort_unstable();
            prop_assert_eq!(order, (0..cands.len()).collect::<Vec<_>>());
        }
    }
}
