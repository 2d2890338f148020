//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`,
//! `/rerank`).

use std::time::Duration;

use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{ModelBackend, ProviderConfig, StructuredRequest, TurnRole};
use crate::error::GatewayError;

pub struct RemoteBackend {
    client: Client,
    base: String,
    model: String,
    embedding_model: String,
    rerank_model: String,
    api_key: Option<String>,
}

impl RemoteBackend {
    /// Must not be called from inside an async runtime.
    pub fn new(config: &ProviderConfig) -> Result<Self, GatewayError> {
        let base = config.endpoint.clone().ok_or_else(|| GatewayError::Config("remote backend needs an endpoint".into()))?;
        let client = Client::builder().build().map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base: base.trim_end_matches('/').to_string(),
            model: config.model_name.clone(),
            embedding_model: config.embedding_model.clone().unwrap_or_else(|| config.model_name.clone()),
            rerank_model: config.rerank_model.clone().unwrap_or_else(|| config.model_name.clone()),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }

    fn post(&self, path: &str, body: &Value, timeout: Duration) -> Result<Value, GatewayError> {
        let mut req = self.client.post(format!("{}{path}", self.base)).timeout(timeout).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let budget_ms = timeout.as_millis() as u64;
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                GatewayError::Timeout { budget_ms }
            } else {
                GatewayError::RemoteUnavailable(e.to_string())
            }
        };
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::RemoteUnavailable(format!("{path} returned {status}")));
        }
        resp.json::<Value>().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout { budget_ms }
            } else {
                GatewayError::SchemaViolation(format!("{path}: body is not JSON: {e}"))
            }
        })
    }
}

fn chat_messages(req: &StructuredRequest) -> Vec<Value> {
    let mut out = vec![json!({"role": "system", "content": req.system_prompt})];
    for turn in &req.dialogue {
        let (role, content) = match turn.role {
            TurnRole::Agent => ("assistant", turn.text.clone()),
            TurnRole::Instruction => ("user", turn.text.clone()),
            TurnRole::Customer => ("user", format!("[customer] {}", turn.text)),
            TurnRole::Analyst => ("user", format!("[analyst] {}", turn.text)),
        };
        let content =
            if turn.attachments.is_empty() { content } else { format!("{content}\n[attachments: {}]", turn.attachments.join(", ")) };
        out.push(json!({"role": role, "content": content}));
    }
    out
}

impl ModelBackend for RemoteBackend {
    fn complete(&self, req: &StructuredRequest, timeout: Duration) -> Result<Value, GatewayError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": chat_messages(req),
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": req.task(), "schema": req.response_schema.to_json_schema()},
            },
        });
        let reply = self.post("/chat/completions", &body, timeout)?;
        let content = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::SchemaViolation("completion has no message content".into()))?;
        let trimmed = content.trim().trim_start_matches("```json").trim_matches('`').trim();
        serde_json::from_str(trimmed).map_err(|_| GatewayError::SchemaViolation(format!("completion is not JSON: {content:.120}")))
    }

    fn embed(&self, text: &str, timeout: Duration) -> Result<Vec<f32>, GatewayError> {
        let reply = self.post("/embeddings", &json!({"model": self.embedding_model, "input": text}), timeout)?;
        let values = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::SchemaViolation("embedding response has no vector".into()))?;
        values
            .iter()
            .map(|v| v.as_f64().map(|x| x as f32))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| GatewayError::SchemaViolation("embedding has non-numeric values".into()))
    }

    fn rerank(&self, query: &str, candidates: &[String], timeout: Duration) -> Result<Vec<usize>, GatewayError> {
        let body = json!({"model": self.rerank_model, "query": query, "documents": candidates});
        let reply = self.post("/rerank", &body, timeout)?;
        let results = reply["results"].as_array().ok_or_else(|| GatewayError::SchemaViolation("rerank response has no results".into()))?;
        let mut scored = results
            .iter()
            .map(|r| Some((r["index"].as_u64()? as usize, r["relevance_score"].as_f64().unwrap_or(0.0))))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| GatewayError::SchemaViolation("rerank result lacks an index".into()))?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(i, _)| i).collect())
    }
}
