//! HTTP/JSON implementations of the provider traits.
//!
//! Wire shapes:
//! - chat: `POST {model, messages, temperature, stop, max_tokens}` answered
//!   with `{choices: [{message: {content}}]}`.
//! - embeddings: `POST {model, input: [..]}` answered with `{data: [{embedding: [..]}]}`.
//! - knowledge graph: `GET ?entity=<keyword>` answered with an ownthink-style
//!   `{data: {entity, desc, avp: [[attr, value], ..]}}`.
//! - attention: `POST {model, text, keywords}` answered with `{weights: {kw: w}}`.
//! - similarity: `POST {model, a: [turn..], b: [turn..]}` answered with `{similarity: s}`.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use log::{debug, warn};
use serde_json::{json, Value};

use super::clock::{Clock, RateLimiter, SystemClock};
use super::{
    apply_stop_sequences, AttentionScorer, ChatProvider, ChatRequest, Embedder, EmbeddingVector, KnowledgeEntry,
    KnowledgeGraph, ProviderConfig, ProviderError, SimilarityScorer,
};
use crate::dialogue::Dialogue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Connect(String),
    Other(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Blocking reqwest transport.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ProviderError::InvalidRequest(format!("http client: {e}")))?;
        Ok(ReqwestTransport { client })
    }
}

impl Transport for ReqwestTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = match request.method {
            Method::Get => self.client.get(&request.url),
            Method::Post => self.client.post(&request.url),
        }
        .timeout(request.timeout);
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        if let Some(body) = &request.body {
            builder = builder.header("content-type", "application/json").body(body.clone());
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else if e.is_connect() {
                TransportError::Connect(e.to_string())
            } else {
                TransportError::Other(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// One configured endpoint: auth, rate limiting and retry with exponential backoff.
///
/// After failed attempt `i` (1-based) the client waits `backoff_base * 2^(i-1)`
/// before the next attempt. Timeouts, connection failures, 429 and 5xx are
/// retried; 401/403 and other 4xx are not.
pub struct HttpEndpoint {
    config: ProviderConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    token: Option<String>,
}

enum Failure {
    Transient(ProviderError),
    Fatal(ProviderError),
}

impl HttpEndpoint {
    /// Reads the token from the configured environment variable, if any.
    pub fn new(config: ProviderConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        let token = config.token_env.as_deref().and_then(|name| std::env::var(name).ok()).filter(|t| !t.is_empty());
        Self::with_token(config, transport, clock, token)
    }

    pub fn with_token(
        config: ProviderConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        token: Option<String>,
    ) -> Self {
        let limiter = RateLimiter::per_minute(config.requests_per_minute.max(1));
        HttpEndpoint { config, transport, clock, limiter, token }
    }

    /// Real network transport and wall clock.
    pub fn connect(config: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self::new(config, Arc::new(ReqwestTransport::new()?), Arc::new(SystemClock::new())))
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn post_json(&self, body: &Value) -> Result<Value, ProviderError> {
        self.execute(Method::Post, self.config.endpoint.clone(), Some(body.to_string()))
    }

    pub fn get_json(&self, query: &[(&str, &str)]) -> Result<Value, ProviderError> {
        let mut url = reqwest::Url::parse(&self.config.endpoint)
            .map_err(|e| ProviderError::InvalidRequest(format!("endpoint: {e}")))?;
        {
            let mut pairs = url.query_pairs_mut();
            for (k, v) in query {
                pairs.append_pair(k, v);
            }
        }
        self.execute(Method::Get, url.to_string(), None)
    }

    fn execute(&self, method: Method, url: String, body: Option<String>) -> Result<Value, ProviderError> {
        let mut headers = vec![("accept".to_string(), "application/json".to_string())];
        if let Some(token) = &self.token {
            headers.push(("authorization".to_string(), format!("Bearer {token}")));
        }
        let request = HttpRequest { method, url, headers, body, timeout: self.config.timeout() };
        let max = self.config.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            match self.attempt_once(&request, attempt) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(e)) => {
                    if attempt >= max {
                        return Err(e);
                    }
                    let delay = self.config.backoff_base() * 2u32.saturating_pow(attempt - 1);
                    warn!("{} attempt {attempt}/{max} failed ({e}); retrying in {delay:?}", request.url);
                    self.clock.sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn attempt_once(&self, request: &HttpRequest, attempt: u32) -> Result<Value, Failure> {
        debug!("{:?} {} (attempt {attempt})", request.method, request.url);
        let response = match self.transport.send(request) {
            Ok(r) => r,
            Err(TransportError::Timeout) => {
                return Err(Failure::Transient(ProviderError::Timeout { attempts: attempt, detail: "timed out".into() }))
            }
            Err(TransportError::Connect(d)) => {
                return Err(Failure::Transient(ProviderError::Timeout { attempts: attempt, detail: d }))
            }
            Err(TransportError::Other(d)) => return Err(Failure::Fatal(ProviderError::Protocol(d))),
        };
        match response.status {
            200..=299 => serde_json::from_str(&response.body)
                .map_err(|e| Failure::Fatal(ProviderError::Protocol(format!("invalid JSON body: {e}")))),
            401 | 403 => Err(Failure::Fatal(ProviderError::Auth(format!("status {}", response.status)))),
            429 => Err(Failure::Transient(ProviderError::RateLimited { attempts: attempt })),
            500..=599 => Err(Failure::Transient(ProviderError::Server { status: response.status, attempts: attempt })),
            s => Err(Failure::Fatal(ProviderError::Protocol(format!("unexpected status {s}: {}", response.body)))),
        }
    }
}

pub struct HttpChat {
    endpoint: HttpEndpoint,
}

impl HttpChat {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpChat { endpoint }
    }
}

impl ChatProvider for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let body = json!({
            "model": self.endpoint.config().model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "stop": request.stop_sequences,
            "max_tokens": request.max_output_tokens,
        });
        let response = self.endpoint.post_json(&body)?;
        let content = response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Protocol("missing choices[0].message.content".into()))?;
        Ok(apply_stop_sequences(content, &request.stop_sequences))
    }
}

pub struct HttpEmbedder {
    endpoint: HttpEndpoint,
    dimension: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpEmbedder { endpoint, dimension: OnceLock::new() }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        let body = json!({ "model": self.endpoint.config().model_id, "input": texts });
        let response = self.endpoint.post_json(&body)?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Protocol("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(ProviderError::Protocol(format!("{} embeddings for {} inputs", data.len(), texts.len())));
        }
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::Protocol("missing embedding".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| ProviderError::Protocol("non-numeric embedding value".into())))
                .collect::<Result<Vec<_>, _>>()?;
            indexed.push((index, EmbeddingVector(values)));
        }
        indexed.sort_by_key(|(i, _)| *i);
        let expected = *self.dimension.get_or_init(|| indexed[0].1.dimension());
        if expected == 0 || indexed.iter().any(|(_, v)| v.dimension() != expected) {
            return Err(ProviderError::Protocol(format!("embedding dimension differs from {expected}")));
        }
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

pub struct HttpKnowledgeGraph {
    endpoint: HttpEndpoint,
}

impl HttpKnowledgeGraph {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpKnowledgeGraph { endpoint }
    }
}

/// Maps an ownthink-style entity description to entries: `desc` first, then
/// one `attr: value` entry per attribute pair.
pub fn entries_from_entity_json(keyword: &str, response: &Value) -> Vec<KnowledgeEntry> {
    let Some(data) = response.get("data").filter(|d| d.is_object()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    if let Some(desc) = data.get("desc").and_then(Value::as_str) {
        out.extend(KnowledgeEntry::new(keyword, desc));
    }
    if let Some(avp) = data.get("avp").and_then(Value::as_array) {
        for pair in avp.iter().filter_map(Value::as_array) {
            if let [Value::String(attr), Value::String(value)] = pair.as_slice() {
                out.extend(KnowledgeEntry::new(keyword, &format!("{attr}: {value}")));
            }
        }
    }
    out
}

impl KnowledgeGraph for HttpKnowledgeGraph {
    fn lookup(&self, keyword: &str) -> Result<Vec<KnowledgeEntry>, ProviderError> {
        let response = self.endpoint.get_json(&[("entity", keyword)])?;
        Ok(entries_from_entity_json(keyword, &response))
    }
}

pub struct HttpAttention {
    endpoint: HttpEndpoint,
}

impl HttpAttention {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpAttention { endpoint }
    }
}

impl AttentionScorer for HttpAttention {
    fn attention_weights(&self, text: &str, keywords: &[String]) -> Result<BTreeMap<String, f64>, ProviderError> {
        let body = json!({ "model": self.endpoint.config().model_id, "text": text, "keywords": keywords });
        let response = self.endpoint.post_json(&body)?;
        let weights = response
            .get("weights")
            .and_then(Value::as_object)
            .ok_or_else(|| ProviderError::Protocol("missing weights object".into()))?;
        let mut out = BTreeMap::new();
        for kw in keywords {
            let w = if text.contains(kw.as_str()) {
                weights.get(kw).and_then(Value::as_f64).unwrap_or(0.0)
            } else {
                0.0
            };
            if !(w >= 0.0) || !w.is_finite() {
                return Err(ProviderError::Protocol(format!("invalid weight {w} for {kw:?}")));
            }
            out.insert(kw.clone(), w);
        }
        Ok(out)
    }
}

pub struct HttpSimilarity {
    endpoint: HttpEndpoint,
}

impl HttpSimilarity {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpSimilarity { endpoint }
    }
}

impl SimilarityScorer for HttpSimilarity {
    fn similarity(&self, a: &Dialogue, b: &Dialogue) -> Result<f64, ProviderError> {
        let ta: Vec<&str> = a.turns().iter().map(|u| u.text.as_str()).collect();
        let tb: Vec<&str> = b.turns().iter().map(|u| u.text.as_str()).collect();
        if ta == tb {
            return Ok(1.0);
        }
        // canonical argument order keeps remote scorers symmetric
        let (first, second) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        let body = json!({ "model": self.endpoint.config().model_id, "a": first, "b": second });
        let response = self.endpoint.post_json(&body)?;
        let s = response
            .get("similarity")
            .and_then(Value::as_f64)
            .ok_or_else(|| ProviderError::Protocol("missing similarity".into()))?;
        if !s.is_finite() {
            return Err(ProviderError::Protocol(format!("similarity {s}")));
        }
        Ok(s.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::clock::MockClock;
    use std::collections::VecDeque;
    use std::sync::Mutex;

    /// Replays canned outcomes and records requests; timeouts consume the
    /// request timeout on the mock clock.
    struct ScriptedTransport {
        clock: Arc<MockClock>,
        replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        seen: Mutex<Vec<HttpRequest>>,
    }

    impl ScriptedTransport {
        fn new(clock: Arc<MockClock>, replies: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(ScriptedTransport { clock, replies: Mutex::new(replies.into()), seen: Mutex::new(Vec::new()) })
        }
    }

    impl Transport for ScriptedTransport {
        fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.seen.lock().unwrap().push(request.clone());
            let reply = self.replies.lock().unwrap().pop_front().unwrap_or(Err(TransportError::Timeout));
            if matches!(reply, Err(TransportError::Timeout)) {
                self.clock.advance(request.timeout);
            }
            reply
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse { status: 200, body: body.to_string() })
    }

    fn status(code: u16) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse { status: code, body: String::new() })
    }

    fn config(attempts: u32) -> ProviderConfig {
        ProviderConfig {
            max_attempts: attempts,
            backoff_base_ms: 1_000,
            timeout_ms: 2_000,
            model_id: "m".into(),
            ..ProviderConfig::new("http://chat.invalid/v1/chat/completions")
        }
    }

    #[test]
    fn unreachable_endpoint_times_out_after_max_attempts() {
        let clock = Arc::new(MockClock::new());
        let transport = ScriptedTransport::new(clock.clone(), vec![]);
        let chat = HttpChat::new(HttpEndpoint::with_token(config(3), transport.clone(), clock.clone(), None));
        let err = chat.chat(&ChatRequest::user("hi")).unwrap_err();
        assert!(matches!(err, ProviderError::Timeout { attempts: 3, .. }), "{err:?}");
        assert_eq!(transport.seen.lock().unwrap().len(), 3);
        assert_eq!(clock.sleeps(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
        // three 2 s timeouts plus 1 s + 2 s of backoff
        assert_eq!(clock.now(), Duration::from_secs(9));
        assert!(clock.now() >= Duration::from_secs(1) * (1 + 2 + 4));
    }

    #[test]
    fn transient_failures_then_success() {
        let clock = Arc::new(MockClock::new());
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"thought: loneliness\nmore"}}]}"#;
        let transport = ScriptedTransport::new(clock.clone(), vec![status(429), status(503), ok(body)]);
        let chat = HttpChat::new(HttpEndpoint::with_token(config(3), transport.clone(), clock.clone(), Some("tok".into())));
        let reply = chat.chat(&ChatRequest::user("P").with_stop("\n")).unwrap();
        assert_eq!(reply, "thought: loneliness");
        let seen = transport.seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[0].headers.contains(&("authorization".into(), "Bearer tok".into())));
        let sent: Value = serde_json::from_str(seen[0].body.as_deref().unwrap()).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["stop"], json!(["\n"]));
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["max_tokens"], 1024);
    }

    #[test]
    fn rate_limited_after_retries_exhausted() {
        let clock = Arc::new(MockClock::new());
        let transport = ScriptedTransport::new(clock.clone(), vec![status(429), status(429)]);
        let chat = HttpChat::new(HttpEndpoint::with_token(config(2), transport, clock, None));
        assert_eq!(chat.chat(&ChatRequest::user("x")).unwrap_err(), ProviderError::RateLimited { attempts: 2 });
    }

    #[test]
    fn auth_and_protocol_errors_are_not_retried() {
        let clock = Arc::new(MockClock::new());
        let transport = ScriptedTransport::new(clock.clone(), vec![status(401)]);
        let chat = HttpChat::new(HttpEndpoint::with_token(config(3), transport.clone(), clock.clone(), None));
        assert!(matches!(chat.chat(&ChatRequest::user("x")), Err(ProviderError::Auth(_))));
        assert_eq!(transport.seen.lock().unwrap().len(), 1);

        let transport = ScriptedTransport::new(clock.clone(), vec![ok(r#"{"nope":1}"#)]);
        let chat = HttpChat::new(HttpEndpoint::with_token(config(3), transport.clone(), clock, None));
        assert!(matches!(chat.chat(&ChatRequest::user("x")), Err(ProviderError::Protocol(_))));
        assert_eq!(transport.seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn limiter_spaces_requests_beyond_capacity() {
        let clock = Arc::new(MockClock::new());
        let body = r#"{"choices":[{"message":{"content":"ok"}}]}"#;
        let transport = ScriptedTransport::new(clock.clone(), (0..4).map(|_| ok(body)).collect());
        let cfg = ProviderConfig { requests_per_minute: 2, ..config(1) };
        let chat = HttpChat::new(HttpEndpoint::with_token(cfg, transport, clock.clone(), None));
        for _ in 0..4 {
            chat.chat(&ChatRequest::user("x")).unwrap();
        }
        assert_eq!(clock.now(), Duration::from_secs(60));
    }

    #[test]
    fn embeddings_are_ordered_and_dimension_checked() {
        let clock = Arc::new(MockClock::new());
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let bad = r#"{"data":[{"embedding":[1.0,0.0,0.0]},{"embedding":[1.0]}]}"#;
        let transport = ScriptedTransport::new(clock.clone(), vec![ok(body), ok(bad)]);
        let emb = HttpEmbedder::new(HttpEndpoint::with_token(config(1), transport.clone(), clock, None));
        let v = emb.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v[0].values(), &[1.0, 0.0]);
        assert_eq!(v[1].dimension(), 2);
        assert!(matches!(emb.embed(&["a".into(), "b".into()]), Err(ProviderError::Protocol(_))));
        let sent: Value = serde_json::from_str(transport.seen.lock().unwrap()[0].body.as_deref().unwrap()).unwrap();
        assert_eq!(sent["input"], json!(["a", "b"]));
    }

    #[test]
    fn knowledge_graph_query_and_mapping() {
        let clock = Arc::new(MockClock::new());
        let body = r#"{"message":"success","data":{"entity":"焦虑","desc":"一种对未来威胁的\n情绪反应","avp":[["类别","情绪"]]}}"#;
        let transport = ScriptedTransport::new(clock.clone(), vec![ok(body), ok(r#"{"message":"success","data":{}}"#)]);
        let cfg = ProviderConfig::new("http://kg.invalid/kg/knowledge");
        let kg = HttpKnowledgeGraph::new(HttpEndpoint::with_token(cfg, transport.clone(), clock, None));
        let entries = kg.lookup("焦虑").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].knowledge(), "一种对未来威胁的 情绪反应");
        assert_eq!(entries[1].knowledge(), "类别: 情绪");
        assert!(kg.lookup("未知").unwrap().is_empty());
        let seen = transport.seen.lock().unwrap();
        assert_eq!(seen[0].method, Method::Get);
        let url = reqwest::Url::parse(&seen[0].url).unwrap();
        assert_eq!(url.query_pairs().next().unwrap(), ("entity".into(), "焦虑".into()));
    }

    #[test]
    fn remote_attention_zeroes_absent_keywords() {
        let clock = Arc::new(MockClock::new());
        let body = r#"{"weights":{"sad":0.7,"happy":0.4}}"#;
        let transport = ScriptedTransport::new(clock.clone(), vec![ok(body)]);
        let scorer = HttpAttention::new(HttpEndpoint::with_token(config(1), transport, clock, None));
        let w = scorer.attention_weights("so sad", &["sad".into(), "happy".into()]).unwrap();
        assert_eq!(w["sad"], 0.7);
        assert_eq!(w["happy"], 0.0);
    }

    #[test]
    fn remote_similarity_is_symmetric_by_construction() {
        use crate::dialogue::{Language, Speaker};
        let clock = Arc::new(MockClock::new());
        let body = r#"{"similarity":0.5}"#;
        let transport = ScriptedTransport::new(clock.clone(), vec![ok(body), ok(body)]);
        let sim = HttpSimilarity::new(HttpEndpoint::with_token(config(1), transport.clone(), clock, None));
        let a = Dialogue::new("a", Language::En, [(Speaker::Patient, "x"), (Speaker::Therapist, "y")]).unwrap();
        let b = Dialogue::new("b", Language::En, [(Speaker::Patient, "z"), (Speaker::Therapist, "w")]).unwrap();
        assert_eq!(sim.similarity(&a, &a).unwrap(), 1.0);
        sim.similarity(&a, &b).unwrap();
        sim.similarity(&b, &a).unwrap();
        let seen = transport.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].body, seen[1].body);
    }
}
