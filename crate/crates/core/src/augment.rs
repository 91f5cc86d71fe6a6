//! Multi-turn dialogue generator: attention-ordered history, candidate
//! generation and parsing, and the similarity-gated regeneration loop.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{Attempt, AugmentationRecord, Dialogue, PostProcessor, Speaker, SpeakerAliases, Verdict};
use crate::prompts::{PromptError, Prompter, TemplateError, TemplateName};
use crate::providers::{AttentionScorer, ChatMessage, ChatRequest, ProviderError, Role, SimilarityScorer};
use crate::text::parse_keyword_list;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("reply could not be parsed into a dialogue: {0}")]
    Parse(String),
    #[error("no keywords could be parsed from the reply")]
    EmptyKeywordSet,
    #[error("invalid punishment config: {0}")]
    InvalidConfig(String),
    #[error("fallback generation failed: {0}")]
    FallbackFailed(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl From<PromptError> for AugmentError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Template(t) => AugmentError::Template(t),
            PromptError::Provider(p) => AugmentError::Provider(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub keyword: String,
    pub knowledge: String,
    pub weight: f64,
}

/// Sorts by weight, heaviest first; equal weights fall back to keyword order.
pub fn sort_history(entries: &mut [HistoryEntry]) {
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.keyword.cmp(&b.keyword)));
}

/// Weighs every entry by the attention its keyword receives over the source
/// dialogue and sorts the entries.
pub fn organize_history(
    mut entries: Vec<HistoryEntry>,
    source: &Dialogue,
    attention: &dyn AttentionScorer,
) -> Result<Vec<HistoryEntry>, ProviderError> {
    if entries.is_empty() {
        return Ok(entries);
    }
    let keywords: Vec<String> = entries.iter().map(|e| e.keyword.clone()).collect();
    let weights = attention.attention_weights(&source.joined_text(), &keywords)?;
    for e in &mut entries {
        e.weight = weights.get(&e.keyword).copied().unwrap_or(0.0).max(0.0);
    }
    sort_history(&mut entries);
    Ok(entries)
}

/// History as alternating user (keyword) and assistant (knowledge) turns.
pub fn history_messages(history: &[HistoryEntry]) -> Vec<ChatMessage> {
    history
        .iter()
        .flat_map(|e| [ChatMessage::new(Role::User, &e.keyword), ChatMessage::new(Role::Assistant, &e.knowledge)])
        .collect()
}

fn default_upper() -> f64 {
    0.90
}

fn default_lower() -> f64 {
    0.35
}

fn default_max_retries() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PunishmentConfig {
    #[serde(default = "default_upper")]
    pub upper_threshold: f64,
    #[serde(default = "default_lower")]
    pub lower_threshold: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PunishmentConfig {
    fn default() -> Self {
        PunishmentConfig {
            upper_threshold: default_upper(),
            lower_threshold: default_lower(),
            max_retries: default_max_retries(),
            seed: 0,
        }
    }
}

impl PunishmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = (self.lower_threshold, self.upper_threshold);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(AugmentError::InvalidConfig(format!("need 0 <= lower < upper <= 1, got lower={lo} upper={hi}")));
        }
        Ok(())
    }

    /// Accepted iff `lower <= s <= upper`.
    pub fn verdict(&self, similarity: f64) -> Verdict {
        if similarity > self.upper_threshold {
            Verdict::TooSimilar
        } else if similarity < self.lower_threshold {
            Verdict::TooDivergent
        } else {
            Verdict::Accepted
        }
    }
}

/// Keywords of the progressive thoughts, sampled for injection on retries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PTKeywordDatabase {
    keywords: Vec<String>,
}

impl PTKeywordDatabase {
    /// `None` when `keywords` is empty after deduplication.
    pub fn new(keywords: Vec<String>) -> Option<Self> {
        let keywords = parse_keyword_list(&keywords.join("\n"));
        (!keywords.is_empty()).then_some(PTKeywordDatabase { keywords })
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &str {
        &self.keywords[rng.random_range(0..self.keywords.len())]
    }
}

pub fn build_pt_keyword_db(thought: &str, prompter: &Prompter<'_>) -> Result<PTKeywordDatabase, AugmentError> {
    let (_, reply) = prompter.ask(TemplateName::PtKePrompt, &[("thought", thought)])?;
    PTKeywordDatabase::new(parse_keyword_list(&reply)).ok_or(AugmentError::EmptyKeywordSet)
}

/// Parses a model reply into a dialogue with the source's id and language.
///
/// Lines before the first role-prefixed line are ignored, unprefixed lines
/// continue the current turn and consecutive turns of one speaker merge.
pub fn parse_dialogue_reply(
    reply: &str,
    source: &Dialogue,
    aliases: &SpeakerAliases,
    post: &PostProcessor,
) -> Result<Dialogue, AugmentError> {
    let mut turns: Vec<(Speaker, String)> = Vec::new();
    for line in reply.lines() {
        match post.split_role_line(aliases, line) {
            Some((speaker, body)) => match turns.last_mut() {
                Some((last, text)) if *last == speaker => {
                    text.push(' ');
                    text.push_str(body);
                }
                _ => turns.push((speaker, body.to_string())),
            },
            None => {
                if let Some((_, text)) = turns.last_mut() {
                    text.push(' ');
                    text.push_str(line.trim());
                }
            }
        }
    }
    let mut cleaned: Vec<(Speaker, String)> = Vec::new();
    for (speaker, text) in turns {
        let text = post.process(&text);
        if text.is_empty() {
            continue;
        }
        match cleaned.last_mut() {
            Some((last, prev)) if *last == speaker => {
                prev.push(' ');
                prev.push_str(&text);
            }
            _ => cleaned.push((speaker, text)),
        }
    }
    if cleaned.len() < 2 {
        return Err(AugmentError::Parse(format!("{} role-tagged turn(s), need 2", cleaned.len())));
    }
    Dialogue::new(source.id(), source.language(), cleaned).map_err(|e| AugmentError::Parse(e.to_string()))
}

/// Scaffolding for one source dialogue's mtd prompt. Empty strings omit the
/// corresponding template section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationContext {
    pub progressive_prompt: String,
    pub knowledge: String,
    pub history: Vec<HistoryEntry>,
}

/// Renders the chat request for one attempt: the direct rewrite prompt when
/// `fallback` is set, otherwise the mtd prompt after the history turns.
pub fn candidate_request(
    source: &Dialogue,
    context: &GenerationContext,
    injected: &[String],
    fallback: bool,
    prompter: &Prompter<'_>,
) -> Result<ChatRequest, TemplateError> {
    let transcript = source.transcript();
    let (messages, prompt) = if fallback {
        (Vec::new(), prompter.registry.render(TemplateName::ChatgptPrompt, &[("dialogue", &transcript)])?)
    } else {
        let prompt = prompter.registry.render(
            TemplateName::MtdPrompt,
            &[
                ("dialogue", &transcript),
                ("thought", &context.progressive_prompt),
                ("knowledge", &context.knowledge),
                ("keywords", &injected.join(", ")),
            ],
        )?;
        (history_messages(&context.history), prompt)
    };
    let mut request = ChatRequest::user(prompt).with_decoding(prompter.decoding);
    request.messages.splice(0..0, messages);
    Ok(request)
}

pub fn generate_candidate(
    source: &Dialogue,
    context: &GenerationContext,
    injected: &[String],
    fallback: bool,
    prompter: &Prompter<'_>,
    aliases: &SpeakerAliases,
    post: &PostProcessor,
) -> Result<Dialogue, AugmentError> {
    let request = candidate_request(source, context, injected, fallback, prompter)?;
    let reply = prompter.chat.chat(&request)?;
    parse_dialogue_reply(&reply, source, aliases, post)
}

/// Runs the accept/regenerate loop for one source dialogue.
///
/// `generate(injected, fallback)` produces one candidate. Up to
/// `max_retries + 1` candidates are scored; from the second one on, a keyword
/// drawn from `keywords` is injected. If none is accepted, one direct
/// rewrite is generated and accepted unscored. Parse failures count as
/// rejected attempts; every other error aborts the loop.
pub fn punish_and_retry<G, R>(
    source: &Dialogue,
    mut generate: G,
    similarity: &dyn SimilarityScorer,
    config: &PunishmentConfig,
    keywords: Option<&PTKeywordDatabase>,
    rng: &mut R,
) -> Result<AugmentationRecord, AugmentError>
where
    G: FnMut(Option<&str>, bool) -> Result<Dialogue, AugmentError>,
    R: Rng,
{
    config.validate()?;
    let mut attempts = Vec::new();
    for n in 1..=config.max_retries + 1 {
        let injected = if n >= 2 { keywords.map(|db| db.sample(rng).to_string()) } else { None };
        match generate(injected.as_deref(), false) {
            Ok(candidate) => {
                let s = similarity.similarity(source, &candidate)?;
                let verdict = config.verdict(s);
                let accepted = verdict == Verdict::Accepted;
                attempts.push(Attempt { similarity: Some(s), verdict, injected_keyword: injected, generated: Some(candidate.clone()) });
                if accepted {
                    return Ok(AugmentationRecord {
                        source_id: source.id().to_string(),
                        attempts,
                        fallback_used: false,
                        final_dialogue: candidate,
                    });
                }
            }
            Err(AugmentError::Parse(_)) => {
                attempts.push(Attempt { similarity: None, verdict: Verdict::ParseFailed, injected_keyword: injected, generated: None });
            }
            Err(e) => return Err(e),
        }
    }
    let fallback = match generate(None, true) {
        Ok(d) => d,
        Err(AugmentError::Parse(reason)) => return Err(AugmentError::FallbackFailed(reason)),
        Err(e) => return Err(e),
    };
    attempts.push(Attempt { similarity: None, verdict: Verdict::Fallback, injected_keyword: None, generated: Some(fallback.clone()) });
    Ok(AugmentationRecord { source_id: source.id().to_string(), attempts, fallback_used: true, final_dialogue: fallback })
}

/// One ungated generation, recorded as accepted with its similarity.
pub fn single_attempt<G>(
    source: &Dialogue,
    mut generate: G,
    similarity: &dyn SimilarityScorer,
) -> Result<AugmentationRecord, AugmentError>
where
    G: FnMut(Option<&str>, bool) -> Result<Dialogue, AugmentError>,
{
    let candidate = generate(None, false)?;
    let s = similarity.similarity(source, &candidate)?;
    Ok(AugmentationRecord {
        source_id: source.id().to_string(),
        attempts: vec![Attempt { similarity: Some(s), verdict: Verdict::Accepted, injected_keyword: None, generated: Some(candidate.clone()) }],
        fallback_used: false,
        final_dialogue: candidate,
    })
}
