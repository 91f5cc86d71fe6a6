//! External capabilities used by the pipeline: chat completion, embeddings,
//! keyword attention, dialogue similarity and knowledge-graph lookup.
//!
//! Every capability is a trait with an HTTP-backed implementation in
//! [`http`], a deterministic local implementation in [`local`] and scripted
//! doubles in [`mock`]. All implementations are `Send + Sync` so one instance
//! can be shared by the pipeline's workers.

pub mod clock;
pub mod http;
pub mod local;
pub mod mock;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::Dialogue;

pub use clock::{Clock, MockClock, SystemClock};
pub use local::{FrequencyAttention, HashEmbedder, JaccardSimilarity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("request timed out after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("server error {status} after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted response: {0}")]
    Unscripted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A single user turn with default decoding settings.
    pub fn user(prompt: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::new(Role::User, prompt)],
            temperature: 0.7,
            stop_sequences: Vec::new(),
            max_output_tokens: 1024,
        }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop_sequences.push(stop.into());
        self
    }

    pub fn with_decoding(mut self, decoding: &Decoding) -> Self {
        self.temperature = decoding.temperature;
        self.max_output_tokens = decoding.max_output_tokens;
        self
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(ProviderError::InvalidRequest("no user message".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(ProviderError::InvalidRequest("empty message content".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ProviderError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

/// Decoding settings applied to every chat request the pipeline issues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding { temperature: 0.7, max_output_tokens: 1024 }
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn apply_stop_sequences(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// One knowledge-graph fact about a keyword. Knowledge text never contains a
/// newline because newline delimits k-shot prompt lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    keyword: String,
    knowledge: String,
}

impl KnowledgeEntry {
    /// Replaces line breaks with spaces; `None` if nothing is left.
    pub fn new(keyword: impl Into<String>, knowledge: &str) -> Option<Self> {
        let knowledge = knowledge.replace(['\r', '\n'], " ").trim().to_string();
        if knowledge.is_empty() {
            return None;
        }
        Some(KnowledgeEntry { keyword: keyword.into(), knowledge })
    }

    pub fn keyword(&self) -> &str {
        &self.keyword
    }

    pub fn knowledge(&self) -> &str {
        &self.knowledge
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1_000
}
fn default_rpm() -> u32 {
    60
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ProviderConfig {
            endpoint: endpoint.into(),
            model_id: String::new(),
            timeout_ms: default_timeout_ms(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_ms(),
            requests_per_minute: default_rpm(),
            token_env: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        reqwest::Url::parse(&self.endpoint).map_err(|e| format!("endpoint {:?}: {e}", self.endpoint))?;
        if self.max_attempts < 1 {
            return Err("max_attempts must be >= 1".into());
        }
        if self.requests_per_minute == 0 {
            return Err("requests_per_minute must be > 0".into());
        }
        Ok(())
    }
}

pub trait ChatProvider: Send + Sync {
    /// Returns the assistant text, cut at the first stop sequence.
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait Embedder: Send + Sync {
    /// One vector per input text, in input order, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

pub trait AttentionScorer: Send + Sync {
    /// Weight per keyword over `text`. Keywords absent from the text weigh 0.
    fn attention_weights(&self, text: &str, keywords: &[String]) -> Result<BTreeMap<String, f64>, ProviderError>;
}

pub trait SimilarityScorer: Send + Sync {
    /// Symmetric score in `[0, 1]`, 1 for identical dialogues.
    fn similarity(&self, a: &Dialogue, b: &Dialogue) -> Result<f64, ProviderError>;
}

pub trait KnowledgeGraph: Send + Sync {
    /// Entries for `keyword`; an unknown keyword yields an empty list.
    fn lookup(&self, keyword: &str) -> Result<Vec<KnowledgeEntry>, ProviderError>;
}

/// Memoizes lookups per keyword for the lifetime of the wrapper. Misses are
/// serialized: the cache lock is held while the inner graph is queried.
pub struct CachedKnowledgeGraph<G> {
    inner: G,
    cache: Mutex<HashMap<String, Vec<KnowledgeEntry>>>,
}

impl<G: KnowledgeGraph> CachedKnowledgeGraph<G> {
    pub fn new(inner: G) -> Self {
        CachedKnowledgeGraph { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cached_keywords(&self) -> usize {
        self.cache.lock().expect("kg cache poisoned").len()
    }
}

impl<G: KnowledgeGraph> KnowledgeGraph for CachedKnowledgeGraph<G> {
    fn lookup(&self, keyword: &str) -> Result<Vec<KnowledgeEntry>, ProviderError> {
        let key = keyword.trim();
        let mut cache = self.cache.lock().expect("kg cache poisoned");
        if let Some(hit) = cache.get(key) {
            return Ok(hit.clone());
        }
        let entries = self.inner.lookup(key)?;
        cache.insert(key.to_string(), entries.clone());
        Ok(entries)
    }
}

/// The full set of capabilities one pipeline run uses.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn Embedder>,
    pub attention: Arc<dyn AttentionScorer>,
    pub similarity: Arc<dyn SimilarityScorer>,
    pub knowledge: Arc<dyn KnowledgeGraph>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::StaticKnowledgeGraph;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn stop_sequence_truncation() {
        let stops = vec!["\n".to_string()];
        assert_eq!(apply_stop_sequences("knowledge A\nkeyword_2...", &stops), "knowledge A");
        assert_eq!(apply_stop_sequences("no stop", &stops), "no stop");
        let two = vec!["END".to_string(), ";".to_string()];
        assert_eq!(apply_stop_sequences("a;bENDc", &two), "a");
    }

    #[test]
    fn knowledge_entry_sanitizes_newlines() {
        let e = KnowledgeEntry::new("k", "line one\nline two\r\n").unwrap();
        assert_eq!(e.knowledge(), "line one line two");
        assert!(KnowledgeEntry::new("k", "\n\n").is_none());
    }

    #[test]
    fn request_validation() {
        assert!(ChatRequest::user("hi").validate().is_ok());
        let mut r = ChatRequest::user("hi");
        r.messages[0].role = Role::System;
        assert!(r.validate().is_err());
        assert!(ChatRequest::user("").validate().is_err());
    }

    struct Counting(AtomicUsize, StaticKnowledgeGraph);
    impl KnowledgeGraph for Counting {
        fn lookup(&self, keyword: &str) -> Result<Vec<KnowledgeEntry>, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            self.1.lookup(keyword)
        }
    }

    #[test]
    fn cache_queries_inner_once_per_keyword() {
        let inner = Counting(AtomicUsize::new(0), StaticKnowledgeGraph::from_pairs([("焦虑", "一种对未来威胁的情绪反应")]));
        let kg = CachedKnowledgeGraph::new(inner);
        assert_eq!(kg.lookup("焦虑").unwrap().len(), 1);
        assert_eq!(kg.lookup("焦虑").unwrap().len(), 1);
        assert!(kg.lookup("未知").unwrap().is_empty());
        assert!(kg.lookup("未知").unwrap().is_empty());
        assert_eq!(kg.inner.0.load(Ordering::SeqCst), 2);
        assert_eq!(kg.cached_keywords(), 2);
    }

    #[test]
    fn provider_config_validation() {
        let mut c = ProviderConfig::new("http://localhost:8080/v1/chat/completions");
        assert!(c.validate().is_ok());
        c.max_attempts = 0;
        assert!(c.validate().is_err());
        let c = ProviderConfig::new("not a url");
        assert!(c.validate().is_err());
    }
}
