//! Document fetchers for link harvesting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("no document for {0}")]
    NotFound(String),
    #[error("fetching {url}: {reason}")]
    Failed { url: String, reason: String },
}

pub trait DocumentFetcher: Send + Sync {
    /// Plain text of the document at `url`.
    fn fetch(&self, url: &str) -> Result<String, FetchError>;
}

/// Serves documents from an in-memory url → text map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureFetcher {
    pub documents: BTreeMap<String, String>,
}

impl FixtureFetcher {
    pub fn new(documents: BTreeMap<String, String>) -> Self {
        Self { documents }
    }

    /// Loads a JSON object mapping urls to document text.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl DocumentFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        self.documents.get(url).cloned().ok_or_else(|| FetchError::NotFound(url.to_string()))
    }
}

/// A fetcher that never finds anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFetch;

impl DocumentFetcher for NoFetch {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        Err(FetchError::NotFound(url.to_string()))
    }
}

/// Live HTTP fetcher; HTML is reduced to text by dropping scripts, styles
/// and tags.
pub struct HttpFetcher {
    client: reqwest::blocking::Client,
}

impl HttpFetcher {
    /// Must not be called from inside an async runtime.
    pub fn new(timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| e.to_string())?;
        Ok(Self { client })
    }
}

impl DocumentFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        let fail = |reason: String| FetchError::Failed { url: url.to_string(), reason };
        let resp = self.client.get(url).send().map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("status {}", resp.status())));
        }
        let body = resp.text().map_err(|e| fail(e.to_string()))?;
        let text = html_to_text(&body);
        if text.is_empty() {
            Err(fail("empty document".into()))
        } else {
            Ok(text)
        }
    }
}

/// Strips markup and collapses whitespace.
pub fn html_to_text(html: &str) -> String {
    static BLOCKS: OnceLock<Regex> = OnceLock::new();
    static TAGS: OnceLock<Regex> = OnceLock::new();
    let blocks = BLOCKS.get_or_init(|| Regex::new(r"(?is)<(script|style)[^>]*>.*?</(script|style)>").expect("static regex"));
    let tags = TAGS.get_or_init(|| Regex::new(r"(?s)<[^>]*>").expect("static regex"));
    let text = blocks.replace_all(html, " ");
    let text = tags.replace_all(&text, " ");
    let text = text.replace("&nbsp;", " ").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_tags() {
        let html =
            "<html><head><style>p{}</style><script>x()</script></head><body><h1>Title</h1><p>Use a&nbsp;reserved host.</p></body></html>";
        assert_eq!(html_to_text(html), "Title Use a reserved host.");
    }

    #[test]
    fn fixture_lookup() {
        let f = FixtureFetcher::new(BTreeMap::from([("https://a.io".to_string(), "doc".to_string())]));
        assert_eq!(f.fetch("https://a.io").unwrap(), "doc");
        assert!(matches!(f.fetch("https://b.io"), Err(FetchError::NotFound(_))));
    }
}
