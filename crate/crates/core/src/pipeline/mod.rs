//! End-to-end orchestration: configuration, per-dialogue stage wiring and
//! ablation switches. Run directories and resumption live in [`run`].

pub mod run;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{
    candidate_request, organize_history, parse_dialogue_reply, punish_and_retry, single_attempt, AugmentError,
    GenerationContext, HistoryEntry, PTKeywordDatabase, PunishmentConfig,
};
use crate::dialogue::{AugmentationRecord, Dialogue, PostProcessor, Speaker, SpeakerAliases};
use crate::knowledge::{build_kshot_block, build_pk_prompt, generate_knowledge, label_clusters, KnowledgeError};
use crate::prompts::{Prompter, PromptTemplateRegistry, TemplateError};
use crate::providers::http::{HttpAttention, HttpChat, HttpEmbedder, HttpEndpoint, HttpKnowledgeGraph, HttpSimilarity};
use crate::providers::mock::{FixtureChat, StaticKnowledgeGraph};
use crate::providers::{
    CachedKnowledgeGraph, ChatRequest, Decoding, FrequencyAttention, HashEmbedder, JaccardSimilarity, ProviderConfig,
    ProviderError, Providers,
};
use crate::thought::{
    build_progressive_prompt, extract_keywords, generate_thought, match_by_text, match_combinations,
    select_candidate_keywords, ThoughtDatabase, ThoughtEntry, ThoughtError, ThoughtLevel, DEFAULT_TOKEN_BUDGET,
};

pub const CHAT_TOKEN_ENV: &str = "KPT_CHAT_TOKEN";
pub const EMBED_TOKEN_ENV: &str = "KPT_EMBED_TOKEN";
pub const KG_TOKEN_ENV: &str = "KPT_KG_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub chat: ProviderConfig,
    /// Falls back to the local hashing embedder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<ProviderConfig>,
    /// Without a knowledge graph every lookup misses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg: Option<ProviderConfig>,
    /// Falls back to term-frequency attention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<ProviderConfig>,
    /// Falls back to token-set Jaccard similarity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<ProviderConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_thought: bool,
    pub disable_knowledge: bool,
    pub disable_punishment: bool,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match (self.disable_thought, self.disable_knowledge, self.disable_punishment) {
            (false, false, false) => "kpt",
            (true, false, false) => "no_thought",
            (false, true, false) => "no_knowledge",
            (false, false, true) => "no_punishment",
            (true, true, true) => "direct",
            _ => "custom",
        }
    }
}

fn default_token_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}

fn default_k_shot_cap() -> usize {
    crate::knowledge::DEFAULT_SHOT_CAP
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub punishment: PunishmentConfig,
    #[serde(default = "default_token_budget")]
    pub token_budget: usize,
    #[serde(default = "default_k_shot_cap")]
    pub k_shot_cap: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub decoding: Decoding,
    /// Extra role labels, e.g. `{"coach": "therapist"}`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub speaker_aliases: BTreeMap<String, Speaker>,
    /// Template overrides by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config key `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.to_string(), message: message.into() }
    }
}

impl PipelineConfig {
    /// A config with the given chat endpoint and defaults everywhere else.
    pub fn with_chat(chat: ProviderConfig) -> Self {
        PipelineConfig {
            providers: ProvidersConfig { chat, embed: None, kg: None, attention: None, similarity: None },
            punishment: PunishmentConfig::default(),
            token_budget: default_token_budget(),
            k_shot_cap: default_k_shot_cap(),
            ablation: Ablation::default(),
            seed: 0,
            workers: 1,
            decoding: Decoding::default(),
            speaker_aliases: BTreeMap::new(),
            templates: BTreeMap::new(),
        }
    }

    /// Parses and validates; errors name the offending key path.
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let config: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                return ConfigError::Syntax(inner.to_string());
            }
            let message = inner.to_string();
            // serde reports a missing field at its parent; name the field itself
            let path = match message.strip_prefix("missing field `").and_then(|r| r.split_once('`')) {
                Some((field, _)) if path == "." => field.to_string(),
                Some((field, _)) => format!("{path}.{field}"),
                None => path,
            };
            ConfigError::Invalid { path, message }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.providers;
        for (name, cfg) in [
            ("chat", Some(&p.chat)),
            ("embed", p.embed.as_ref()),
            ("kg", p.kg.as_ref()),
            ("attention", p.attention.as_ref()),
            ("similarity", p.similarity.as_ref()),
        ] {
            if let Some(cfg) = cfg {
                cfg.validate().map_err(|m| {
                    let field = m.split_whitespace().next().filter(|f| f.chars().all(|c| c.is_ascii_lowercase() || c == '_'));
                    match field {
                        Some(f) => ConfigError::at(&format!("providers.{name}.{f}"), m.clone()),
                        None => ConfigError::at(&format!("providers.{name}"), m.clone()),
                    }
                })?;
            }
        }
        self.punishment.validate().map_err(|e| ConfigError::at("punishment", e.to_string()))?;
        if self.token_budget == 0 {
            return Err(ConfigError::at("token_budget", "must be positive"));
        }
        if self.workers == 0 {
            return Err(ConfigError::at("workers", "must be at least 1"));
        }
        if !(0.0..=2.0).contains(&self.decoding.temperature) {
            return Err(ConfigError::at("decoding.temperature", "must be within 0..=2"));
        }
        self.registry()?;
        Ok(())
    }

    pub fn registry(&self) -> Result<PromptTemplateRegistry, ConfigError> {
        PromptTemplateRegistry::with_overrides(&self.templates).map_err(|e| ConfigError::at("templates", e.to_string()))
    }

    pub fn aliases(&self) -> SpeakerAliases {
        let mut aliases = SpeakerAliases::default();
        for (label, speaker) in &self.speaker_aliases {
            aliases.insert(label, *speaker);
        }
        aliases
    }

    /// Hash of every setting that affects outputs; the worker count is excluded.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        let json = serde_json::to_string(&canonical).expect("config serialization is infallible");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn with_default_token(mut cfg: ProviderConfig, env: &str) -> ProviderConfig {
    if cfg.token_env.is_none() {
        cfg.token_env = Some(env.to_string());
    }
    cfg
}

/// Remote providers for configured endpoints, local stand-ins for the rest.
pub fn providers_from_config(config: &ProvidersConfig) -> Result<Providers, ProviderError> {
    let connect = |cfg: &ProviderConfig, env: &str| HttpEndpoint::connect(with_default_token(cfg.clone(), env));
    Ok(Providers {
        chat: Arc::new(HttpChat::new(connect(&config.chat, CHAT_TOKEN_ENV)?)),
        embedder: match &config.embed {
            Some(cfg) => Arc::new(HttpEmbedder::new(connect(cfg, EMBED_TOKEN_ENV)?)),
            None => Arc::new(HashEmbedder::default()),
        },
        attention: match &config.attention {
            Some(cfg) => Arc::new(HttpAttention::new(connect(cfg, EMBED_TOKEN_ENV)?)),
            None => Arc::new(FrequencyAttention),
        },
        similarity: match &config.similarity {
            Some(cfg) => Arc::new(HttpSimilarity::new(connect(cfg, EMBED_TOKEN_ENV)?)),
            None => Arc::new(JaccardSimilarity),
        },
        knowledge: match &config.kg {
            Some(cfg) => Arc::new(CachedKnowledgeGraph::new(HttpKnowledgeGraph::new(connect(cfg, KG_TOKEN_ENV)?))),
            None => Arc::new(StaticKnowledgeGraph::default()),
        },
    })
}

/// Fully offline providers: the fixture chat model, hashing embedder,
/// frequency attention, Jaccard similarity and the given graph.
pub fn mock_providers(kg: StaticKnowledgeGraph) -> Providers {
    Providers {
        chat: Arc::new(FixtureChat::new()),
        embedder: Arc::new(HashEmbedder::default()),
        attention: Arc::new(FrequencyAttention),
        similarity: Arc::new(JaccardSimilarity),
        knowledge: Arc::new(kg),
    }
}

/// Seed for one dialogue, derived from the run seed and the dialogue id so
/// results do not depend on scheduling.
pub fn dialogue_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("thought stage: {0}")]
    Thought(#[from] ThoughtError),
    #[error("knowledge stage: {0}")]
    Knowledge(#[from] KnowledgeError),
    #[error("dialogue stage: {0}")]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Everything prepared for one source dialogue before generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Preparation {
    pub context: GenerationContext,
    pub thought_keywords: Option<PTKeywordDatabase>,
    /// Use the direct rewrite prompt for every attempt.
    pub direct: bool,
    pub notes: Vec<String>,
}

/// Result of one source dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueOutcome {
    pub record: AugmentationRecord,
    pub notes: Vec<String>,
}

/// Per-dialogue stage wiring over a fixed set of providers.
pub struct Augmenter {
    pub config: PipelineConfig,
    pub providers: Providers,
    pub database: ThoughtDatabase,
    registry: PromptTemplateRegistry,
    aliases: SpeakerAliases,
    post: PostProcessor,
}

impl Augmenter {
    pub fn new(config: PipelineConfig, providers: Providers, database: ThoughtDatabase) -> Result<Self, ConfigError> {
        config.validate()?;
        let registry = config.registry()?;
        let aliases = config.aliases();
        let post = PostProcessor::new(&aliases);
        Ok(Augmenter { config, providers, database, registry, aliases, post })
    }

    pub fn registry(&self) -> &PromptTemplateRegistry {
        &self.registry
    }

    pub fn aliases(&self) -> &SpeakerAliases {
        &self.aliases
    }

    pub fn post_processor(&self) -> &PostProcessor {
        &self.post
    }

    fn prompter(&self) -> Prompter<'_> {
        Prompter::new(self.providers.chat.as_ref(), &self.registry, &self.config.decoding)
    }

    fn ranked_entries(&self, candidates: &[String]) -> Vec<&ThoughtEntry> {
        let ranked = match match_combinations(candidates, &self.database) {
            Ok(r) => r,
            Err(_) => match_by_text(candidates, &self.database),
        };
        ranked.iter().take(3).map(|r| &self.database.entries[r.index]).collect()
    }

    fn source_thought(&self, source: &Dialogue, exemplars: Option<&str>) -> Result<Option<String>, ThoughtError> {
        let pairs = source.patient_therapist_pairs();
        let (context, level) = match pairs.len() {
            0 => return Ok(None),
            1 => (&source.turns()[pairs[0]..pairs[0] + 2], ThoughtLevel::Utterance),
            _ => (source.turns(), ThoughtLevel::Multiturn),
        };
        generate_thought(context, level, exemplars, &self.prompter(), &self.post).map(Some)
    }

    fn knowledge_stage(&self, source: &Dialogue, keywords: &[String], candidates: &[String], seed: u64) -> Result<(String, Vec<HistoryEntry>), StageError> {
        let p = &self.providers;
        let block = build_kshot_block(keywords, p.knowledge.as_ref(), self.config.k_shot_cap)?;
        let mut generated = Vec::new();
        for kw in candidates {
            match generate_knowledge(&block, kw, p.chat.as_ref(), &self.config.decoding, &self.post) {
                Ok(k) => generated.push(k),
                Err(KnowledgeError::EmptyKnowledge) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let labels = label_clusters(source, &generated, p.embedder.as_ref(), &self.prompter(), seed)?;
        let pk_prompt = build_pk_prompt(&block, source, &labels, &self.registry)?;
        let reply = p.chat.chat(&ChatRequest::user(pk_prompt).with_decoding(&self.config.decoding))?;
        let knowledge = self.post.process(&reply);
        let entries: Vec<HistoryEntry> = generated
            .iter()
            .map(|g| HistoryEntry {
                keyword: g.source_keywords.last().cloned().unwrap_or_default(),
                knowledge: g.text.clone(),
                weight: 0.0,
            })
            .collect();
        let history = organize_history(entries, source, p.attention.as_ref())?;
        Ok((knowledge, history))
    }

    /// Runs the thought and knowledge stages enabled by the ablation flags.
    pub fn prepare(&self, source: &Dialogue) -> Result<Preparation, StageError> {
        let ab = self.config.ablation;
        let mut prep = Preparation::default();
        if ab.disable_thought && ab.disable_knowledge {
            prep.direct = true;
            prep.notes.push("thought and knowledge disabled: direct rewrite prompt".into());
            return Ok(prep);
        }
        let seed = dialogue_seed(self.config.seed, source.id());
        let p = &self.providers;
        let keywords = extract_keywords(source, &self.prompter())?;
        let candidates = select_candidate_keywords(source, &keywords, p.embedder.as_ref(), p.attention.as_ref(), seed)?;

        if ab.disable_thought {
            prep.notes.push("thought disabled: no progressive thought, no keyword injection".into());
        } else {
            let ranked = self.ranked_entries(&candidates);
            let exemplars = if ranked.is_empty() {
                prep.notes.push("empty thought database: thought generated without exemplars".into());
                None
            } else {
                Some(build_progressive_prompt(&ranked, self.config.token_budget, &self.registry)?)
            };
            if let Some(thought) = self.source_thought(source, exemplars.as_ref().map(|e| e.text.as_str()))? {
                match crate::augment::build_pt_keyword_db(&thought, &self.prompter()) {
                    Ok(db) => prep.thought_keywords = Some(db),
                    Err(AugmentError::EmptyKeywordSet) => prep.notes.push("no thought keywords: no injection".into()),
                    Err(e) => return Err(e.into()),
                }
                prep.context.progressive_prompt = thought;
            } else {
                prep.notes.push("no patient/therapist pair: no progressive thought".into());
            }
        }

        if ab.disable_knowledge {
            prep.notes.push("knowledge disabled: no knowledge, no history".into());
        } else {
            let (knowledge, history) = self.knowledge_stage(source, &keywords, &candidates, seed)?;
            prep.context.knowledge = knowledge;
            prep.context.history = history;
        }
        Ok(prep)
    }

    /// The chat request of the first generation attempt.
    pub fn first_request(&self, source: &Dialogue, prep: &Preparation) -> Result<ChatRequest, TemplateError> {
        candidate_request(source, &prep.context, &[], prep.direct, &self.prompter())
    }

    pub fn augment(&self, source: &Dialogue) -> Result<DialogueOutcome, StageError> {
        let prep = self.prepare(source)?;
        let prompter = self.prompter();
        let generate = |injected: Option<&str>, fallback: bool| -> Result<Dialogue, AugmentError> {
            let injected: Vec<String> = injected.map(|k| vec![k.to_string()]).unwrap_or_default();
            let request = candidate_request(source, &prep.context, &injected, fallback || prep.direct, &prompter)?;
            let reply = prompter.chat.chat(&request)?;
            parse_dialogue_reply(&reply, source, &self.aliases, &self.post)
        };
        let similarity = self.providers.similarity.as_ref();
        let record = if self.config.ablation.disable_punishment {
            single_attempt(source, generate, similarity)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(dialogue_seed(self.config.punishment.seed, source.id()));
            punish_and_retry(source, generate, similarity, &self.config.punishment, prep.thought_keywords.as_ref(), &mut rng)?
        };
        Ok(DialogueOutcome { record, notes: prep.notes })
    }
}

/// Plain-text rendering of a chat request: one `--- role ---` header per message.
pub fn request_snapshot(request: &ChatRequest) -> String {
    let mut out = String::new();
    for m in &request.messages {
        let role = match m.role {
            crate::providers::Role::System => "system",
            crate::providers::Role::User => "user",
            crate::providers::Role::Assistant => "assistant",
        };
        out.push_str(&format!("--- {role} ---\n{}\n", m.content));
    }
    out
}
