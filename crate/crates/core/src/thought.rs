//! Progressive thought generator: keyword extraction, candidate selection,
//! the dialogue-thought database, keyword-ratio matching and token-budgeted
//! prompt assembly.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{kmeans, select_representative_cluster, ClusterError, MAX_CLUSTERS};
use crate::dialogue::{Corpus, Dialogue, PostProcessor, Speaker, Utterance, THOUGHT_NEXT, THOUGHT_PRIOR};
use crate::prompts::{PromptError, Prompter, PromptTemplateRegistry, TemplateError, TemplateName};
use crate::providers::{AttentionScorer, Embedder, ProviderError};
use crate::text::{normalize_keyword, parse_keyword_list, token_count, tokenize};

/// Maximum number of earlier combinations chained before the current one.
pub const MAX_CHAIN: usize = 3;
pub const DEFAULT_TOKEN_BUDGET: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThoughtError {
    #[error("no keywords could be parsed from the reply")]
    EmptyKeywordSet,
    #[error("model returned an empty thought")]
    EmptyThought,
    #[error("invalid thought context: {0}")]
    InvalidContext(String),
    #[error("invalid combination: {0}")]
    InvalidCombination(String),
    #[error("no database entry shares a keyword with the candidates")]
    NoMatch,
    #[error("thought database line {line}: {reason}")]
    DatabaseLine { line: usize, reason: String },
    #[error("every dialogue failed: {0}")]
    AllDialoguesFailed(BuildReport),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl From<PromptError> for ThoughtError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Template(t) => ThoughtError::Template(t),
            PromptError::Provider(p) => ThoughtError::Provider(p),
        }
    }
}

/// Renders the dialogue as `Role: text` lines into `kw_prompt` and parses the
/// reply as a keyword list.
pub fn extract_keywords(dialogue: &Dialogue, prompter: &Prompter<'_>) -> Result<Vec<String>, ThoughtError> {
    let (_, reply) = prompter.ask(TemplateName::KwPrompt, &[("dialogue", &dialogue.transcript())])?;
    let keywords = parse_keyword_list(&reply);
    if keywords.is_empty() {
        return Err(ThoughtError::EmptyKeywordSet);
    }
    Ok(keywords)
}

/// Clusters the keywords' embeddings (at most five clusters), scores them by
/// attention over the dialogue text and returns the members of the
/// highest-scoring cluster, heaviest first.
pub fn select_candidate_keywords(
    dialogue: &Dialogue,
    keywords: &[String],
    embedder: &dyn Embedder,
    attention: &dyn AttentionScorer,
    seed: u64,
) -> Result<Vec<String>, ThoughtError> {
    if keywords.len() <= 1 {
        return Ok(keywords.to_vec());
    }
    let vectors = embedder.embed(keywords)?;
    let assignment = kmeans(&vectors, MAX_CLUSTERS, seed)?;
    let weights = attention.attention_weights(&dialogue.joined_text(), keywords)?;
    let (_, mut members) = select_representative_cluster(keywords, &assignment, &weights);
    let w = |k: &String| weights.get(k).copied().unwrap_or(0.0);
    members.sort_by(|a, b| w(b).total_cmp(&w(a)));
    Ok(members)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThoughtLevel {
    /// One patient utterance and the therapist reply to it.
    Utterance,
    /// Two or more patient/therapist pairs.
    Multiturn,
}

/// Asks for a single-line progressive thought over `context`, optionally
/// primed with progressive-thought exemplars.
pub fn generate_thought(
    context: &[Utterance],
    level: ThoughtLevel,
    exemplars: Option<&str>,
    prompter: &Prompter<'_>,
    post: &PostProcessor,
) -> Result<String, ThoughtError> {
    let template = match level {
        ThoughtLevel::Utterance => {
            if context.len() != 2 || context[0].speaker != Speaker::Patient || context[1].speaker != Speaker::Therapist {
                return Err(ThoughtError::InvalidContext(
                    "utterance level needs exactly one patient utterance followed by a therapist reply".into(),
                ));
            }
            TemplateName::UlPrompt
        }
        ThoughtLevel::Multiturn => {
            let pairs = context
                .windows(2)
                .filter(|w| w[0].speaker == Speaker::Patient && w[1].speaker == Speaker::Therapist)
                .count();
            if pairs < 2 {
                return Err(ThoughtError::InvalidContext(format!("multiturn level needs 2+ pairs, got {pairs}")));
            }
            TemplateName::MtPrompt
        }
    };
    let rendered: Vec<String> = context.iter().map(|u| format!("{}: {}", u.speaker, u.text)).collect();
    let (_, reply) =
        prompter.ask(template, &[("exemplars", exemplars.unwrap_or("")), ("dialogue", &rendered.join("\n"))])?;
    let thought = post.process(&reply);
    if thought.is_empty() {
        return Err(ThoughtError::EmptyThought);
    }
    Ok(thought)
}

/// One `patient<thought_prior>thought<thought_next>therapist` unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThoughtStep {
    patient_utterance: String,
    thought: String,
    therapist_utterance: String,
}

fn check_field(name: &str, value: &str) -> Result<(), ThoughtError> {
    if value.is_empty() {
        return Err(ThoughtError::InvalidCombination(format!("{name} is empty")));
    }
    if value.contains('\n') || value.contains('\r') {
        return Err(ThoughtError::InvalidCombination(format!("{name} contains a line break")));
    }
    if value.contains(THOUGHT_PRIOR) || value.contains(THOUGHT_NEXT) {
        return Err(ThoughtError::InvalidCombination(format!("{name} contains a reserved marker")));
    }
    Ok(())
}

impl ThoughtStep {
    pub fn new(
        patient_utterance: impl Into<String>,
        thought: impl Into<String>,
        therapist_utterance: impl Into<String>,
    ) -> Result<Self, ThoughtError> {
        let step = ThoughtStep {
            patient_utterance: patient_utterance.into(),
            thought: thought.into(),
            therapist_utterance: therapist_utterance.into(),
        };
        check_field("patient utterance", &step.patient_utterance)?;
        check_field("thought", &step.thought)?;
        check_field("therapist utterance", &step.therapist_utterance)?;
        Ok(step)
    }

    pub fn patient_utterance(&self) -> &str {
        &self.patient_utterance
    }

    pub fn thought(&self) -> &str {
        &self.thought
    }

    pub fn therapist_utterance(&self) -> &str {
        &self.therapist_utterance
    }

    fn parse(line: &str) -> Result<Self, ThoughtError> {
        let bad = || ThoughtError::InvalidCombination(format!("not a dialogue-thought combination: {line:?}"));
        let (patient, rest) = line.split_once(THOUGHT_PRIOR).ok_or_else(bad)?;
        let (thought, therapist) = rest.split_once(THOUGHT_NEXT).ok_or_else(bad)?;
        ThoughtStep::new(patient, thought, therapist)
    }
}

impl fmt::Display for ThoughtStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{THOUGHT_PRIOR}{}{THOUGHT_NEXT}{}", self.patient_utterance, self.thought, self.therapist_utterance)
    }
}

/// A thought step together with up to [`MAX_CHAIN`] preceding steps of the
/// same dialogue. Serialized as one step per line, oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueThoughtCombination {
    prior: Vec<ThoughtStep>,
    current: ThoughtStep,
}

impl DialogueThoughtCombination {
    pub fn new(prior: Vec<ThoughtStep>, current: ThoughtStep) -> Result<Self, ThoughtError> {
        if prior.len() > MAX_CHAIN {
            return Err(ThoughtError::InvalidCombination(format!("chain of {} exceeds {MAX_CHAIN}", prior.len())));
        }
        Ok(DialogueThoughtCombination { prior, current })
    }

    pub fn prior(&self) -> &[ThoughtStep] {
        &self.prior
    }

    pub fn current(&self) -> &ThoughtStep {
        &self.current
    }

    pub fn chain_depth(&self) -> usize {
        self.prior.len()
    }

    pub fn serialize(&self) -> String {
        self.prior.iter().chain(std::iter::once(&self.current)).map(|s| s.to_string()).collect::<Vec<_>>().join("\n")
    }

    pub fn parse(serialized: &str) -> Result<Self, ThoughtError> {
        let mut steps = serialized.split('\n').map(ThoughtStep::parse).collect::<Result<Vec<_>, _>>()?;
        let current = steps.pop().ok_or_else(|| ThoughtError::InvalidCombination("empty".into()))?;
        DialogueThoughtCombination::new(steps, current)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThoughtEntry {
    pub combination: DialogueThoughtCombination,
    /// Keywords of the source dialogue, deduplicated, never empty.
    pub keywords: Vec<String>,
    pub source_id: String,
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    serialized: String,
    keywords: Vec<String>,
    source_id: String,
    chain_depth: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThoughtDatabase {
    pub entries: Vec<ThoughtEntry>,
}

impl ThoughtDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per line: `serialized`, `keywords`, `source_id`, `chain_depth`.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            let wire = EntryWire {
                serialized: e.combination.serialize(),
                keywords: e.keywords.clone(),
                source_id: e.source_id.clone(),
                chain_depth: e.combination.chain_depth(),
            };
            out.extend_from_slice(serde_json::to_string(&wire).expect("entry serialization is infallible").as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ThoughtError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| ThoughtError::DatabaseLine { line: i + 1, reason };
            let wire: EntryWire = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let combination = DialogueThoughtCombination::parse(&wire.serialized).map_err(|e| err(e.to_string()))?;
            if combination.chain_depth() != wire.chain_depth {
                return Err(err(format!(
                    "chain_depth {} but serialized chain has {}",
                    wire.chain_depth,
                    combination.chain_depth()
                )));
            }
            if wire.keywords.is_empty() {
                return Err(err("empty keyword set".into()));
            }
            entries.push(ThoughtEntry { combination, keywords: wire.keywords, source_id: wire.source_id });
        }
        Ok(ThoughtDatabase { entries })
    }
}

/// Dialogues skipped while building the database, with the reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub dialogues: usize,
    pub entries: usize,
    pub skipped: Vec<(String, String)>,
}

impl fmt::Display for BuildReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} dialogue(s), {} entries, {} skipped", self.dialogues, self.entries, self.skipped.len())?;
        for (id, reason) in &self.skipped {
            write!(f, "\n  {id}: {reason}")?;
        }
        Ok(())
    }
}

fn dialogue_entries(
    dialogue: &Dialogue,
    prompter: &Prompter<'_>,
    post: &PostProcessor,
) -> Result<Vec<ThoughtEntry>, ThoughtError> {
    let pairs = dialogue.patient_therapist_pairs();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let keywords = extract_keywords(dialogue, prompter)?;
    let mut steps: Vec<ThoughtStep> = Vec::new();
    let mut entries = Vec::new();
    for i in pairs {
        let context = &dialogue.turns()[i..i + 2];
        let thought = generate_thought(context, ThoughtLevel::Utterance, None, prompter, post)?;
        let step = ThoughtStep::new(&context[0].text, thought, &context[1].text)?;
        let prior = steps[steps.len().saturating_sub(MAX_CHAIN)..].to_vec();
        entries.push(ThoughtEntry {
            combination: DialogueThoughtCombination::new(prior, step.clone())?,
            keywords: keywords.clone(),
            source_id: dialogue.id().to_string(),
        });
        steps.push(step);
    }
    Ok(entries)
}

/// Generates an utterance-level thought for every adjacent patient→therapist
/// pair and chains each combination to the previous ones of its dialogue.
///
/// Dialogues that fail are skipped and listed in the report; the build fails
/// only when every dialogue failed. Up to `workers` dialogues run at once;
/// entries keep corpus order.
pub fn build_thought_database(
    corpus: &Corpus,
    prompter: &Prompter<'_>,
    post: &PostProcessor,
    workers: usize,
) -> Result<(ThoughtDatabase, BuildReport), ThoughtError> {
    let results = crate::parallel::parallel_map(corpus.dialogues(), workers, |d| dialogue_entries(d, prompter, post));
    let mut report = BuildReport { dialogues: corpus.len(), ..Default::default() };
    let mut db = ThoughtDatabase::default();
    for (d, result) in corpus.dialogues().iter().zip(results) {
        match result {
            Ok(entries) => db.entries.extend(entries),
            Err(e) => {
                warn!("skipping dialogue {}: {e}", d.id());
                report.skipped.push((d.id().to_string(), e.to_string()));
            }
        }
    }
    report.entries = db.len();
    if !corpus.is_empty() && report.skipped.len() == corpus.len() {
        return Err(ThoughtError::AllDialoguesFailed(report));
    }
    Ok((db, report))
}

/// One database entry's position in a ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    /// Index into [`ThoughtDatabase::entries`].
    pub index: usize,
    pub score: f64,
    pub intersection: usize,
}

fn normalized_set(words: &[String]) -> BTreeSet<String> {
    words.iter().map(|w| normalize_keyword(w)).filter(|w| !w.is_empty()).collect()
}

fn rank_order(db: &ThoughtDatabase, a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.intersection.cmp(&a.intersection))
        .then_with(|| db.entries[a.index].source_id.cmp(&db.entries[b.index].source_id))
        .then(a.index.cmp(&b.index))
}

/// Ranks entries by `|candidates ∩ keywords| / |keywords|`, then by
/// intersection size, source id and database position. Zero scores are
/// dropped; if nothing scores, returns [`ThoughtError::NoMatch`].
pub fn match_combinations(candidates: &[String], db: &ThoughtDatabase) -> Result<Vec<RankedEntry>, ThoughtError> {
    let wanted = normalized_set(candidates);
    let mut ranked: Vec<RankedEntry> = db
        .entries
        .iter()
        .enumerate()
        .filter_map(|(index, e)| {
            let kw = normalized_set(&e.keywords);
            let intersection = kw.intersection(&wanted).count();
            (intersection > 0).then(|| RankedEntry { index, score: intersection as f64 / kw.len() as f64, intersection })
        })
        .collect();
    if ranked.is_empty() {
        return Err(ThoughtError::NoMatch);
    }
    ranked.sort_by(|a, b| rank_order(db, a, b));
    Ok(ranked)
}

/// Fallback ranking when keyword matching finds nothing: counts candidates
/// whose tokens all occur in the entry's serialized text. Every entry is
/// ranked, including those with a zero count.
pub fn match_by_text(candidates: &[String], db: &ThoughtDatabase) -> Vec<RankedEntry> {
    let wanted: Vec<Vec<String>> = candidates
        .iter()
        .map(|c| tokenize(c).into_iter().map(normalize_keyword).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect();
    let mut ranked: Vec<RankedEntry> = db
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let serialized = e.combination.serialize();
            let tokens: HashSet<String> = tokenize(&serialized).into_iter().map(normalize_keyword).collect();
            let intersection = wanted.iter().filter(|w| w.iter().all(|t| tokens.contains(t))).count();
            let score = if wanted.is_empty() { 0.0 } else { intersection as f64 / wanted.len() as f64 };
            RankedEntry { index, score, intersection }
        })
        .collect();
    ranked.sort_by(|a, b| rank_order(db, a, b));
    ranked
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressivePrompt {
    pub text: String,
    /// Number of combinations included (1 to 3).
    pub combinations: usize,
    /// Tokens of the included combinations, excluding the frame.
    pub token_count: usize,
}

/// Chooses how many of the top-ranked combinations to include: three when
/// their combined length is under `token_budget` tokens, otherwise two, or
/// one when two would exceed twice the budget.
pub fn choose_combination_count(serialized: &[String], token_budget: usize) -> usize {
    let tokens = |n: usize| serialized[..n].iter().map(|s| token_count(s)).sum::<usize>();
    match serialized.len() {
        0 => 0,
        1 => 1,
        n => {
            if n >= 3 && tokens(3) < token_budget {
                3
            } else if tokens(2) > 2 * token_budget {
                1
            } else {
                2
            }
        }
    }
}

/// Serializes the chosen combinations, joins them with blank lines and wraps
/// them in the `pt_frame` template.
pub fn build_progressive_prompt(
    ranked: &[&ThoughtEntry],
    token_budget: usize,
    registry: &PromptTemplateRegistry,
) -> Result<ProgressivePrompt, ThoughtError> {
    if ranked.is_empty() {
        return Err(ThoughtError::InvalidContext("no ranked combinations".into()));
    }
    let serialized: Vec<String> = ranked.iter().take(3).map(|e| e.combination.serialize()).collect();
    let n = choose_combination_count(&serialized, token_budget);
    let chosen = &serialized[..n];
    let body = chosen.join("\n\n");
    let text = registry.render(TemplateName::PtFrame, &[("combinations", &body)])?;
    Ok(ProgressivePrompt { text, combinations: n, token_count: chosen.iter().map(|s| token_count(s)).sum() })
}
