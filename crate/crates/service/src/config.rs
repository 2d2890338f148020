//! Service configuration: one TOML file plus `ONCALL_*` environment overrides.
//!
//! An override names a dotted key with `__` between segments, so
//! `ONCALL_DEDUP__THETA=0.8` sets `dedup.theta`. Values are read as TOML
//! scalars and fall back to plain strings. Variables whose first segment is
//! not a config section are ignored; `ONCALL_API_KEY` holds the model token.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use oncall_core::domain::DedupConfig;
use oncall_core::engine::EngineConfig;
use oncall_core::gateway::ProviderConfig;
use oncall_core::kb::StoreConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "ONCALL_";

const SECTIONS: &[&str] = &["server", "dedup", "engine", "provider", "store", "fetch"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid: {0}")]
    Parse(String),
    #[error("override {var}: {reason}")]
    Override { var: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Concurrent closure reviews; 0 runs each review inside its close event.
    pub review_parallelism: usize,
    /// Store directory; the store lives in memory when absent.
    pub store_dir: Option<PathBuf>,
    /// JSON list of seed entries, imported when the store starts empty.
    pub seed: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), review_parallelism: 2, store_dir: None, seed: None, audit_log: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchMode {
    #[default]
    None,
    Http,
    /// Serve documents from a JSON map of url to text.
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchConfig {
    pub mode: FetchMode,
    pub documents: Option<PathBuf>,
    pub timeout_ms: u64,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self { mode: FetchMode::None, documents: None, timeout_ms: 5_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub server: ServerConfig,
    /// Kept at the top level so the threshold reads as `dedup.theta`.
    pub dedup: DedupConfig,
    pub engine: EngineConfig,
    pub provider: ProviderConfig,
    pub store: StoreConfig,
    pub fetch: FetchConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, var: &str, path: &[String], raw: &str) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("override path is non-empty");
    let mut table = root;
    for seg in parents {
        let slot = table.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table =
            slot.as_table_mut().ok_or_else(|| ConfigError::Override { var: var.into(), reason: format!("`{seg}` is not a section") })?;
    }
    table.insert(last.clone(), parse_value(raw));
    Ok(())
}

impl ServiceConfig {
    /// Reads `path` (defaults when `None`) and applies overrides from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::from_toml(&text, env)
    }

    pub fn from_toml<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if root.get("engine").and_then(|e| e.get("dedup")).is_some() {
            return Err(ConfigError::Invalid("set the threshold under [dedup], not [engine.dedup]".into()));
        }
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (var, raw) in vars {
            let path: Vec<String> = var[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
            if !SECTIONS.contains(&path[0].as_str()) {
                continue;
            }
            if path.len() < 2 || path.iter().any(String::is_empty) {
                return Err(ConfigError::Override { var, reason: "expected SECTION__KEY".into() });
            }
            apply_override(&mut root, &var, &path, &raw)?;
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dedup.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.provider.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.listen_addr()?;
        if self.fetch.mode == FetchMode::Fixture && self.fetch.documents.is_none() {
            return Err(ConfigError::Invalid("fixture fetch needs fetch.documents".into()));
        }
        if self.store.chunk_size <= self.store.overlap {
            return Err(ConfigError::Invalid("store.chunk_size must exceed store.overlap".into()));
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.server.listen.parse().map_err(|_| ConfigError::Invalid(format!("listen address `{}`", self.server.listen)))
    }

    /// Engine settings with the top-level threshold and review lane folded in.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig { dedup: self.dedup, review_inline: self.server.review_parallelism == 0, ..self.engine.clone() }
    }
}
