//! A replayable scenario: corpus, seed knowledge, scripted model rules and
//! fetchable documents, loaded from one directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use oncall_core::engine::{Engine, EngineConfig};
use oncall_core::fetch::FixtureFetcher;
use oncall_core::gateway::{Gateway, ScriptRules};
use oncall_core::kb::{KnowledgeStore, SeedEntry, StoreConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::EvalError;

/// Embedding width used by every scripted scenario.
pub const SCRIPTED_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    NoAnswerReview,
    NoSelfImprove,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Self::Full, Self::NoAnswerReview, Self::NoSelfImprove];

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAnswerReview => "no-answer-review",
            Self::NoSelfImprove => "no-self-improve",
        }
    }

    pub fn apply(self, mut cfg: EngineConfig) -> EngineConfig {
        match self {
            Self::Full => {}
            Self::NoAnswerReview => cfg.review.answer_review = false,
            Self::NoSelfImprove => cfg.self_improve = false,
        }
        cfg
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.label() == s).ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub corpus: LabeledCorpus,
    pub seed: Vec<SeedEntry>,
    /// Fixture rules; the built-in rules always back them up.
    pub rules: ScriptRules,
    pub documents: BTreeMap<String, String>,
}

fn read_optional(path: &Path) -> Result<Option<String>, EvalError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(EvalError::io(path, e)),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, EvalError> {
    serde_json::from_str(text).map_err(|e| EvalError::Scenario(format!("{}: {e}", path.display())))
}

impl Scenario {
    /// Reads `corpus.jsonl` plus the optional `seed.json`, `rules.json` and
    /// `documents.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let corpus = LabeledCorpus::load(&dir.join("corpus.jsonl"))?;
        let mut s = Self { corpus, ..Self::default() };
        let seed = dir.join("seed.json");
        if let Some(text) = read_optional(&seed)? {
            s.seed = parse_json(&seed, &text)?;
        }
        let rules = dir.join("rules.json");
        if let Some(text) = read_optional(&rules)? {
            s.rules = parse_json(&rules, &text)?;
        }
        let docs = dir.join("documents.json");
        if let Some(text) = read_optional(&docs)? {
            s.documents = parse_json(&docs, &text)?;
        }
        Ok(s)
    }

    /// Writes the scenario in the layout [`Scenario::load`] reads.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| EvalError::io(&p, e))
        };
        write("corpus.jsonl", self.corpus.to_jsonl())?;
        write("seed.json", pretty(&self.seed))?;
        write("rules.json", pretty(&self.rules))?;
        write("documents.json", pretty(&self.documents))?;
        Ok(())
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::scripted(self.rules.clone().merged_with(ScriptRules::builtin()), SCRIPTED_DIM)
    }

    /// Fresh in-memory store holding the seed entries.
    pub fn seeded_store(&self, gateway: &Gateway) -> Result<Arc<KnowledgeStore>, EvalError> {
        let store = KnowledgeStore::in_memory(gateway.embedding_dim(), StoreConfig::default());
        if !self.seed.is_empty() {
            store.import_entries(gateway, &self.seed)?;
        }
        Ok(Arc::new(store))
    }

    /// Engine over a fresh seeded store, configured for `mode`.
    pub fn engine(&self, config: EngineConfig, mode: Mode) -> Result<Engine, EvalError> {
        let gw = self.gateway();
        let store = self.seeded_store(&gw)?;
        let engine = Engine::new(gw, store, mode.apply(config))?.with_fetcher(Arc::new(FixtureFetcher::new(self.documents.clone())));
        Ok(engine)
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("fixture serializes");
    s.push('\n');
    s
}
