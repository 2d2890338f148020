//! Single entry point for every model call: structured chat completion,
//! text embedding and candidate reranking.
//!
//! [`Gateway`] owns the contract (schema validation, retry on malformed
//! replies, hard per-call timeout, unit-norm embeddings, permutation-valued
//! rerank). Backends implementing [`ModelBackend`] only produce raw replies.

mod remote;
mod schema;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use crate::domain::{AuthorRole, Embedding, Message};
use crate::error::GatewayError;
use crate::prompts::{PromptId, PromptSet};

pub use remote::RemoteBackend;
pub use schema::{FieldKind, ResponseSchema, SchemaField};
pub use scripted::{hashed_embedding, overlap_rerank, Conditions, Failure, ScriptRule, ScriptRules, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub backend: BackendKind,
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub embedding_model: Option<String>,
    pub rerank_model: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub embedding_dim: usize,
    /// Environment variable holding the bearer token for the remote backend.
    pub api_key_env: String,
    /// Scripted rules fixture, backed by the built-in rule set.
    pub rules_path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            endpoint: None,
            model_name: "scripted".into(),
            embedding_model: None,
            rerank_model: None,
            timeout_ms: 2_000,
            max_retries: 1,
            embedding_dim: 256,
            api_key_env: "ONCALL_API_KEY".into(),
            rules_path: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be positive".into()));
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_none() {
            return Err(GatewayError::Config("remote backend needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Speaker of one dialogue turn handed to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRole {
    Customer,
    Analyst,
    Agent,
    /// Task input assembled by the caller (sections, references).
    Instruction,
}

impl TurnRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Customer => "customer",
            Self::Analyst => "analyst",
            Self::Agent => "agent",
            Self::Instruction => "instruction",
        }
    }
}

impl From<AuthorRole> for TurnRole {
    fn from(r: AuthorRole) -> Self {
        match r {
            AuthorRole::Customer => Self::Customer,
            AuthorRole::Analyst => Self::Analyst,
            AuthorRole::Agent => Self::Agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
}

impl Turn {
    pub fn instruction(text: impl Into<String>) -> Self {
        Self { role: TurnRole::Instruction, text: text.into(), attachments: Vec::new() }
    }

    pub fn from_message(m: &Message) -> Self {
        Self { role: m.author.into(), text: m.text.clone(), attachments: m.attachments.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRequest {
    pub system_prompt: String,
    pub dialogue: Vec<Turn>,
    pub response_schema: ResponseSchema,
}

impl StructuredRequest {
    pub fn task(&self) -> &str {
        &self.response_schema.name
    }
}

/// Raw model access. Implementations must return within `timeout`.
pub trait ModelBackend: Send + Sync {
    /// Structured completion; the returned value is validated by the gateway.
    fn complete(&self, req: &StructuredRequest, timeout: Duration) -> Result<Value, GatewayError>;
    fn embed(&self, text: &str, timeout: Duration) -> Result<Vec<f32>, GatewayError>;
    /// Indices of `candidates`, best first.
    fn rerank(&self, query: &str, candidates: &[String], timeout: Duration) -> Result<Vec<usize>, GatewayError>;
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    config: ProviderConfig,
    prompts: PromptSet,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>, config: ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self { backend, config, prompts: PromptSet::default() })
    }

    /// Scripted backend over `rules` with the given embedding dimension.
    pub fn scripted(rules: ScriptRules, embedding_dim: usize) -> Self {
        let config = ProviderConfig { embedding_dim, ..ProviderConfig::default() };
        Self { backend: Arc::new(ScriptedBackend::new(rules, embedding_dim)), config, prompts: PromptSet::default() }
    }

    pub fn from_config(config: ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn ModelBackend> = match config.backend {
            BackendKind::Scripted => {
                let rules = match &config.rules_path {
                    Some(path) => ScriptRules::load(path)?.merged_with(ScriptRules::builtin()),
                    None => ScriptRules::builtin(),
                };
                Arc::new(ScriptedBackend::new(rules, config.embedding_dim))
            }
            BackendKind::Remote => Arc::new(RemoteBackend::new(&config)?),
        };
        Ok(Self { backend, config, prompts: PromptSet::default() })
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_timeout_ms(mut self, timeout_ms: u64) -> Self {
        self.config.timeout_ms = timeout_ms.max(1);
        self
    }

    pub fn prompt(&self, id: PromptId) -> String {
        self.prompts.render(id)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn complete_structured(&self, req: &StructuredRequest) -> Result<Value, GatewayError> {
        if req.response_schema.is_empty() {
            return Err(GatewayError::Config("response schema has no fields".into()));
        }
        let budget = self.config.timeout();
        let start = Instant::now();
        let mut last_violation = None;
        for attempt in 0..=self.config.max_retries {
            let Some(remaining) = budget.checked_sub(start.elapsed()).filter(|d| !d.is_zero()) else {
                break;
            };
            match self.backend.complete(req, remaining) {
                Ok(reply) => {
                    if start.elapsed() > budget {
                        break;
                    }
                    match req.response_schema.validate(&reply) {
                        Ok(()) => return Ok(reply),
                        Err(why) => {
                            debug!(task = req.task(), attempt, %why, "schema violation");
                            last_violation = Some(why);
                        }
                    }
                }
                Err(GatewayError::SchemaViolation(why)) => last_violation = Some(why),
                Err(e) => return Err(e),
            }
        }
        match last_violation {
            Some(why) if start.elapsed() <= budget => Err(GatewayError::SchemaViolation(why)),
            _ => {
                warn!(task = req.task(), budget_ms = self.config.timeout_ms, "model call timed out");
                Err(GatewayError::Timeout { budget_ms: self.config.timeout_ms })
            }
        }
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let start = Instant::now();
        let raw = self.backend.embed(text, self.config.timeout())?;
        if start.elapsed() > self.config.timeout() {
            return Err(GatewayError::Timeout { budget_ms: self.config.timeout_ms });
        }
        if raw.len() != self.config.embedding_dim {
            return Err(GatewayError::DimensionMismatch { expected: self.config.embedding_dim, got: raw.len() });
        }
        Embedding::normalized(&raw).ok_or_else(|| GatewayError::SchemaViolation("embedding is zero or non-finite".into()))
    }

    pub fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<usize>, GatewayError> {
        if candidates.is_empty() {
            return Err(GatewayError::EmptyCandidates);
        }
        let start = Instant::now();
        let order = self.backend.rerank(query, candidates, self.config.timeout())?;
        if start.elapsed() > self.config.timeout() {
            return Err(GatewayError::Timeout { budget_ms: self.config.timeout_ms });
        }
        let mut seen = vec![false; candidates.len()];
        let valid = order.len() == candidates.len() && order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true));
        if valid {
            Ok(order)
        } else {
            Err(GatewayError::SchemaViolation(format!("rerank returned {order:?}, not a permutation of 0..{}", candidates.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FreeText;

    impl ModelBackend for FreeText {
        fn complete(&self, _: &StructuredRequest, _: Duration) -> Result<Value, GatewayError> {
            Ok(Value::String("Sure! It is Within Scope.".into()))
        }
        fn embed(&self, _: &str, _: Duration) -> Result<Vec<f32>, GatewayError> {
            Ok(vec![1.0, 0.0])
        }
        fn rerank(&self, _: &str, c: &[String], _: Duration) -> Result<Vec<usize>, GatewayError> {
            Ok(vec![0; c.len()])
        }
    }

    fn schema() -> ResponseSchema {
        ResponseSchema::new("scope_classification").required("class", FieldKind::String)
    }

    #[test]
    fn free_text_never_passes_through() {
        let cfg = ProviderConfig { embedding_dim: 2, max_retries: 2, ..Default::default() };
        let gw = Gateway::new(Arc::new(FreeText), cfg).unwrap();
        let req = StructuredRequest { system_prompt: "p".into(), dialogue: vec![], response_schema: schema() };
        assert!(matches!(gw.complete_structured(&req), Err(GatewayError::SchemaViolation(_))));
    }

    #[test]
    fn non_permutation_rerank_rejected() {
        let cfg = ProviderConfig { embedding_dim: 2, ..Default::default() };
        let gw = Gateway::new(Arc::new(FreeText), cfg).unwrap();
        assert!(gw.rerank("q", &["a".into(), "b".into()]).is_err());
        assert_eq!(gw.rerank("q", &["a".into()]).unwrap(), vec![0]);
        assert_eq!(gw.rerank("q", &[]), Err(GatewayError::EmptyCandidates));
    }

    #[test]
    fn embed_checks_dimension_and_text() {
        let cfg = ProviderConfig { embedding_dim: 3, ..Default::default() };
        let gw = Gateway::new(Arc::new(FreeText), cfg).unwrap();
        assert_eq!(gw.embed("  "), Err(GatewayError::EmptyText));
        assert!(matches!(gw.embed("x"), Err(GatewayError::DimensionMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn empty_schema_is_config_error() {
        let gw = Gateway::scripted(ScriptRules::default(), 8);
        let req = StructuredRequest { system_prompt: "p".into(), dialogue: vec![], response_schema: ResponseSchema::new("x") };
        assert!(matches!(gw.complete_structured(&req), Err(GatewayError::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ProviderConfig { timeout_ms: 0, ..Default::default() }.validate().is_err());
        assert!(ProviderConfig { backend: BackendKind::Remote, ..Default::default() }.validate().is_err());
    }
}
