//! Scripted, deterministic providers for tests and offline runs.
//!
//! Scripts are keyed on request content rather than call order wherever the
//! pipeline may issue requests concurrently. [`SequenceSimilarity`] is the
//! exception: it replays scores in call order and is meant for driving one
//! sequential retry loop.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{
    apply_stop_sequences, ChatProvider, ChatRequest, Embedder, EmbeddingVector, KnowledgeEntry, KnowledgeGraph,
    ProviderError, SimilarityScorer,
};
use crate::dialogue::{Dialogue, PostProcessor, SpeakerAliases};
use crate::prompts::task_tag;
use crate::text::{is_cjk, tokenize};

enum Matcher {
    Exact(String),
    Contains(String),
}

/// Chat double answering from `(matcher → reply)` rules on the last user message.
#[derive(Default)]
pub struct ScriptedChat {
    rules: Vec<(Matcher, Result<String, ProviderError>)>,
    default: Option<Result<String, ProviderError>>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_exact(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push((Matcher::Exact(prompt.into()), Ok(reply.into())));
        self
    }

    pub fn on_contains(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push((Matcher::Contains(needle.into()), Ok(reply.into())));
        self
    }

    pub fn fail_on_contains(mut self, needle: impl Into<String>, error: ProviderError) -> Self {
        self.rules.push((Matcher::Contains(needle.into()), Err(error)));
        self
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(Ok(reply.into()));
        self
    }

    /// Every request answers `reply`.
    pub fn always(reply: impl Into<String>) -> Self {
        Self::new().with_default(reply)
    }
}

impl ChatProvider for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let prompt = request.prompt();
        let hit = self
            .rules
            .iter()
            .find(|(m, _)| match m {
                Matcher::Exact(p) => p == prompt,
                Matcher::Contains(s) => prompt.contains(s.as_str()),
            })
            .map(|(_, r)| r)
            .or(self.default.as_ref())
            .ok_or_else(|| ProviderError::Unscripted(prompt.chars().take(80).collect()))?;
        hit.clone().map(|text| apply_stop_sequences(&text, &request.stop_sequences))
    }
}

/// Wraps a chat provider and keeps every request it sees.
pub struct RecordingChat {
    inner: Arc<dyn ChatProvider>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl RecordingChat {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        RecordingChat { inner, requests: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("recording poisoned").clone()
    }
}

impl ChatProvider for RecordingChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.requests.lock().expect("recording poisoned").push(request.clone());
        self.inner.chat(request)
    }
}

/// Embedder returning fixed vectors per text.
#[derive(Default)]
pub struct TableEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        TableEmbedder { table: entries.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .map(|v| EmbeddingVector(v.clone()))
                    .ok_or_else(|| ProviderError::Unscripted(format!("no embedding for {t:?}")))
            })
            .collect()
    }
}

/// In-memory knowledge graph. Raw knowledge is sanitized like remote results.
#[derive(Debug, Default, Clone)]
pub struct StaticKnowledgeGraph {
    facts: BTreeMap<String, Vec<String>>,
}

impl StaticKnowledgeGraph {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (k, v) in pairs {
            facts.entry(k.into()).or_default().push(v.into());
        }
        StaticKnowledgeGraph { facts }
    }

    /// Reads `{"keyword": "fact"}` or `{"keyword": ["fact", ...]}`.
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            One(String),
            Many(Vec<String>),
        }
        let raw: BTreeMap<String, OneOrMany> = serde_json::from_str(json)?;
        let facts = raw
            .into_iter()
            .map(|(k, v)| {
                let list = match v {
                    OneOrMany::One(s) => vec![s],
                    OneOrMany::Many(v) => v,
                };
                (k, list)
            })
            .collect();
        Ok(StaticKnowledgeGraph { facts })
    }
}

impl KnowledgeGraph for StaticKnowledgeGraph {
    fn lookup(&self, keyword: &str) -> Result<Vec<KnowledgeEntry>, ProviderError> {
        Ok(self
            .facts
            .get(keyword)
            .map(|list| list.iter().filter_map(|k| KnowledgeEntry::new(keyword, k)).collect())
            .unwrap_or_default())
    }
}

/// Replays scores in call order; errors once the script is exhausted.
pub struct SequenceSimilarity {
    scores: Mutex<VecDeque<f64>>,
}

impl SequenceSimilarity {
    pub fn new(scores: impl IntoIterator<Item = f64>) -> Self {
        SequenceSimilarity { scores: Mutex::new(scores.into_iter().collect()) }
    }

    pub fn remaining(&self) -> usize {
        self.scores.lock().expect("sequence poisoned").len()
    }
}

impl SimilarityScorer for SequenceSimilarity {
    fn similarity(&self, _a: &Dialogue, _b: &Dialogue) -> Result<f64, ProviderError> {
        self.scores
            .lock()
            .expect("sequence poisoned")
            .pop_front()
            .ok_or_else(|| ProviderError::Unscripted("similarity script exhausted".into()))
    }
}

/// Offline stand-in for a chat model that understands the default templates.
///
/// It dispatches on the `### task:` tag of the prompt and derives every reply
/// from the prompt text alone, so replies are reproducible and independent of
/// call order. Rewrites vary with a hash of the whole prompt, which makes the
/// regeneration loop see different candidates when a keyword is injected.
#[derive(Default)]
pub struct FixtureChat {
    post: PostProcessor,
    aliases: SpeakerAliases,
}

const STOPWORDS: &[&str] = &[
    "the", "and", "that", "this", "with", "have", "just", "about", "what", "when", "your", "you", "are", "was", "for",
    "but", "not", "been", "from", "they", "them", "there", "their", "would", "could", "should", "feel", "like", "really",
    "very", "much", "some", "more", "know", "think", "will", "into", "then", "than", "it's", "i'm", "don't", "can't",
    "also", "even", "because", "how", "does", "did", "had", "has", "all", "any", "can", "out", "our", "who", "why",
];

fn prompt_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn mix(h: u64, a: u64, b: u64) -> u64 {
    let mut x = h ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 29)
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].trim_matches('\n'))
}

fn has_cjk(text: &str) -> bool {
    text.chars().any(is_cjk)
}

/// Frequent content words: two-character chunks of CJK runs and Latin words
/// of four or more letters outside a stopword list.
fn salient_words(text: &str, limit: usize) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut push = |w: String| {
        if !counts.contains_key(&w) {
            order.push(w.clone());
        }
        *counts.entry(w).or_default() += 1;
    };
    let mut run = String::new();
    let flush = |run: &mut String, push: &mut dyn FnMut(String)| {
        let chars: Vec<char> = run.chars().collect();
        for chunk in chars.chunks(2).filter(|c| c.len() == 2) {
            push(chunk.iter().collect());
        }
        run.clear();
    };
    for c in text.chars() {
        if is_cjk(c) {
            run.push(c);
        } else {
            flush(&mut run, &mut push);
        }
    }
    flush(&mut run, &mut push);
    for word in text.split(|c: char| !(c.is_ascii_alphabetic() || c == '\'')) {
        let w = word.to_ascii_lowercase();
        if w.len() >= 4 && !STOPWORDS.contains(&w.as_str()) {
            push(w);
        }
    }
    let mut ranked: Vec<(usize, usize, String)> =
        order.into_iter().enumerate().map(|(i, w)| (counts[&w], i, w)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(limit).map(|(_, _, w)| w).collect()
}

fn join_tokens(tokens: &[&str]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let cjk_edge = t.chars().next().is_some_and(|c| is_cjk(c) || !c.is_ascii())
            || (i > 0 && tokens[i - 1].chars().last().is_some_and(|c| is_cjk(c) || !c.is_ascii()));
        if i > 0 && !cjk_edge {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

impl FixtureChat {
    pub fn new() -> Self {
        Self::default()
    }

    fn body_text(&self, section: &str) -> String {
        section
            .lines()
            .map(|l| match self.post.split_role_line(&self.aliases, l) {
                Some((_, body)) => body.to_string(),
                None => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn keywords(&self, section: &str) -> String {
        salient_words(&self.body_text(section), 5).join(", ")
    }

    fn thought(&self, section: &str) -> String {
        let text = self.body_text(section);
        let words = salient_words(&text, 2);
        let first = words.first().cloned().unwrap_or_else(|| "feelings".into());
        let second = words.get(1).cloned().unwrap_or_else(|| first.clone());
        if has_cjk(&text) {
            format!("来访者在{first}上有困扰，咨询师应先共情再温和地探讨{second}。")
        } else {
            format!("The patient is struggling with {first}; acknowledge it, then gently explore {second}.")
        }
    }

    fn labels(&self, prompt: &str) -> String {
        let mut out = Vec::new();
        for line in prompt.lines() {
            let Some(rest) = line.strip_prefix("cluster ") else { continue };
            let Some((id, members)) = rest.split_once(':') else { continue };
            let word = salient_words(members, 1).into_iter().next().unwrap_or_else(|| "情绪".into());
            if has_cjk(members) {
                out.push(format!("{}: {word}相关", id.trim()));
            } else {
                out.push(format!("{}: {word} concerns", id.trim()));
            }
        }
        out.join("\n")
    }

    fn psych_knowledge(&self, prompt: &str) -> String {
        let section = between(prompt, "<dialogue>", "</dialogue>").unwrap_or(prompt);
        let words = salient_words(section, 3);
        let known: Vec<&str> = prompt.lines().filter_map(|l| l.split_once("<knowledge>")).map(|(k, _)| k.trim()).collect();
        if has_cjk(section) {
            let mut out = format!("与{}相关的困扰需要先被倾听和确认，再逐步引导来访者寻找应对方式。", words.join("、"));
            if !known.is_empty() {
                out.push_str(&format!("可参考的知识：{}。", known.join("、")));
            }
            out
        } else {
            let mut out =
                format!("Concerns about {} should be heard and validated before guiding the client toward coping steps.", words.join(", "));
            if !known.is_empty() {
                out.push_str(&format!(" Relevant knowledge: {}.", known.join(", ")));
            }
            out
        }
    }

    fn generated_knowledge(&self, prompt: &str) -> String {
        let body = prompt.strip_suffix("<knowledge>").unwrap_or(prompt);
        let query = body.rsplit('\n').next().unwrap_or(body).trim();
        if has_cjk(query) {
            format!("{query}是一种需要被理解和接纳的心理体验\n下一个<knowledge>额外内容")
        } else {
            format!("{query} is a psychological experience that deserves understanding\nnext<knowledge>extra")
        }
    }

    fn rewrite(&self, prompt: &str, direct: bool) -> String {
        let section = between(prompt, "<dialogue>", "</dialogue>").unwrap_or("");
        let turns: Vec<(crate::dialogue::Speaker, String)> = section
            .lines()
            .filter_map(|l| self.post.split_role_line(&self.aliases, l))
            .map(|(s, b)| (s, b.to_string()))
            .collect();
        let injected = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Make sure the dialogue mentions:"))
            .map(|k| k.trim().to_string());
        let h = prompt_hash(prompt);
        let mode = if direct { 1 } else { h % 4 };
        let zh = has_cjk(section);
        let mut lines = vec![if zh { "以下是改写后的对话：".to_string() } else { "Here is the rewritten dialogue:".to_string() }];
        for (i, (speaker, text)) in turns.iter().enumerate() {
            let tokens = tokenize(text);
            let mut kept: Vec<&str> = match mode {
                0 => tokens.clone(),
                1 => tokens.iter().enumerate().filter(|(j, _)| !mix(h, i as u64, *j as u64).is_multiple_of(5)).map(|(_, t)| *t).collect(),
                2 => tokens.iter().enumerate().filter(|(j, _)| !mix(h, i as u64, *j as u64).is_multiple_of(2)).map(|(_, t)| *t).collect(),
                _ => Vec::new(),
            };
            if kept.is_empty() {
                kept = if mode == 3 {
                    if zh { vec!["我想聊点别的。"] } else { vec!["Let us talk about something else."] }
                } else {
                    tokens.clone()
                };
            }
            let mut body = join_tokens(&kept);
            if i == 0 {
                if let Some(k) = &injected {
                    body.push_str(if zh { "，" } else { " " });
                    body.push_str(k);
                }
            }
            if mode == 2 && i == 0 {
                // two consecutive lines for one speaker
                lines.push(format!("{}:  {}", speaker, if zh { "嗯……" } else { "Well..." }));
            }
            lines.push(format!("{}:  {}!!", speaker, body));
        }
        lines.join("\n")
    }
}

impl ChatProvider for FixtureChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let prompt = request.prompt();
        let reply = match task_tag(prompt) {
            Some("keywords") => self.keywords(between(prompt, "<dialogue>", "</dialogue>").unwrap_or(prompt)),
            Some("utterance-thought") | Some("multiturn-thought") => {
                self.thought(between(prompt, "<dialogue>", "</dialogue>").unwrap_or(prompt))
            }
            Some("labels") => self.labels(prompt),
            Some("psych-knowledge") => self.psych_knowledge(prompt),
            Some("thought-keywords") => self.keywords(between(prompt, "<thought>", "</thought>").unwrap_or(prompt)),
            Some("rewrite") => self.rewrite(prompt, false),
            Some("direct-rewrite") => self.rewrite(prompt, true),
            _ if prompt.ends_with("<knowledge>") => self.generated_knowledge(prompt),
            _ => "OK".to_string(),
        };
        Ok(apply_stop_sequences(&reply, &request.stop_sequences))
    }
}
