//! Dialogue data model, JSONL corpus format, windowing and text clean-up.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opens the thought section of a serialized dialogue-thought combination.
pub const THOUGHT_PRIOR: &str = "<thought_prior>";
/// Closes the thought section of a serialized dialogue-thought combination.
pub const THOUGHT_NEXT: &str = "<thought_next>";

const RESERVED_MARKERS: [&str; 2] = [THOUGHT_PRIOR, THOUGHT_NEXT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Therapist,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Patient => "Patient",
            Speaker::Therapist => "Therapist",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Patient => Speaker::Therapist,
            Speaker::Therapist => Speaker::Patient,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DialogueError {
    #[error("dialogue id is empty")]
    EmptyId,
    #[error("dialogue needs at least 2 turns, got {0}")]
    TooFewTurns(usize),
    #[error("turn {0} has empty text")]
    EmptyText(usize),
    #[error("turn {index} contains reserved marker {marker}")]
    ReservedMarker { index: usize, marker: &'static str },
}

/// An ordered patient/therapist exchange. Construct through [`Dialogue::new`]
/// so that the turn invariants hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DialogueWire", into = "DialogueWire")]
pub struct Dialogue {
    id: String,
    language: Language,
    turns: Vec<Utterance>,
}

impl Dialogue {
    /// Builds a dialogue, trimming turn text and assigning contiguous indices.
    pub fn new<I, S>(id: impl Into<String>, language: Language, turns: I) -> Result<Self, DialogueError>
    where
        I: IntoIterator<Item = (Speaker, S)>,
        S: AsRef<str>,
    {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(DialogueError::EmptyId);
        }
        let mut out = Vec::new();
        for (index, (speaker, text)) in turns.into_iter().enumerate() {
            let text = text.as_ref().trim();
            if text.is_empty() {
                return Err(DialogueError::EmptyText(index));
            }
            if let Some(marker) = RESERVED_MARKERS.iter().find(|m| text.contains(*m)) {
                return Err(DialogueError::ReservedMarker { index, marker });
            }
            out.push(Utterance { speaker, text: text.to_string(), index });
        }
        if out.len() < 2 {
            return Err(DialogueError::TooFewTurns(out.len()));
        }
        Ok(Dialogue { id, language, turns: out })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn turns(&self) -> &[Utterance] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Same turns under a different id.
    pub fn with_id(&self, id: impl Into<String>) -> Dialogue {
        Dialogue { id: id.into(), language: self.language, turns: self.turns.clone() }
    }

    /// All turn texts joined by a single space.
    pub fn joined_text(&self) -> String {
        self.turns.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// One `Role: text` line per turn.
    pub fn transcript(&self) -> String {
        self.turns
            .iter()
            .map(|u| format!("{}: {}", u.speaker, u.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Indices `i` where turn `i` is a patient turn answered by a therapist at `i + 1`.
    pub fn patient_therapist_pairs(&self) -> Vec<usize> {
        self.turns
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].speaker == Speaker::Patient && w[1].speaker == Speaker::Therapist)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TurnWire {
    speaker: String,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DialogueWire {
    id: String,
    language: Language,
    turns: Vec<TurnWire>,
}

impl From<Dialogue> for DialogueWire {
    fn from(d: Dialogue) -> Self {
        DialogueWire {
            id: d.id,
            language: d.language,
            turns: d
                .turns
                .into_iter()
                .map(|u| TurnWire {
                    speaker: match u.speaker {
                        Speaker::Patient => "patient".into(),
                        Speaker::Therapist => "therapist".into(),
                    },
                    text: u.text,
                })
                .collect(),
        }
    }
}

impl TryFrom<DialogueWire> for Dialogue {
    type Error = String;

    fn try_from(w: DialogueWire) -> Result<Self, Self::Error> {
        wire_to_dialogue(w, &SpeakerAliases::default()).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Error)]
enum WireError {
    #[error("unknown speaker alias {0:?}")]
    Alias(String),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

fn wire_to_dialogue(w: DialogueWire, aliases: &SpeakerAliases) -> Result<Dialogue, WireError> {
    let mut turns = Vec::with_capacity(w.turns.len());
    for t in w.turns {
        let speaker = aliases.resolve(&t.speaker).ok_or_else(|| WireError::Alias(t.speaker.clone()))?;
        turns.push((speaker, t.text));
    }
    Ok(Dialogue::new(w.id, w.language, turns)?)
}

/// Maps dataset-specific role labels onto [`Speaker`]. Lookup is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerAliases {
    table: HashMap<String, Speaker>,
}

impl SpeakerAliases {
    pub fn empty() -> Self {
        SpeakerAliases { table: HashMap::new() }
    }

    pub fn insert(&mut self, label: &str, speaker: Speaker) {
        self.table.insert(label.trim().to_lowercase(), speaker);
    }

    pub fn resolve(&self, label: &str) -> Option<Speaker> {
        self.table.get(&label.trim().to_lowercase()).copied()
    }

    /// Labels sorted longest first, so prefix matching prefers the most specific alias.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.table.keys().cloned().collect();
        labels.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then_with(|| a.cmp(b)));
        labels
    }

    /// Reads a JSON object `{"label": "patient" | "therapist", ...}` and
    /// merges it over the defaults.
    pub fn from_json_overrides(json: &str) -> Result<Self, serde_json::Error> {
        let overrides: HashMap<String, Speaker> = serde_json::from_str(json)?;
        let mut aliases = SpeakerAliases::default();
        for (label, speaker) in overrides {
            aliases.insert(&label, speaker);
        }
        Ok(aliases)
    }
}

impl Default for SpeakerAliases {
    fn default() -> Self {
        let mut a = SpeakerAliases::empty();
        for label in [
            "patient", "client", "questioner", "seeker", "help-seeker", "user", "elder", "来访者", "患者", "求助者",
            "提问者", "病人", "老人",
        ] {
            a.insert(label, Speaker::Patient);
        }
        for label in [
            "therapist", "counselor", "counsellor", "supporter", "helper", "doctor", "assistant", "咨询师",
            "心理咨询师", "治疗师", "医生", "回答者", "答主",
        ] {
            a.insert(label, Speaker::Therapist);
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    dialogues: Vec<Dialogue>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate dialogue id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: unknown speaker alias {label:?}")]
    UnknownSpeakerAlias { line: usize, label: String },
    #[error("line {line}: text contains reserved marker {marker}")]
    ReservedMarker { line: usize, marker: &'static str },
}

impl Corpus {
    pub fn new(name: impl Into<String>, dialogues: Vec<Dialogue>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.id.clone()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Corpus { name: name.into(), dialogues })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    /// Parses one JSON object per line. Blank lines are skipped; line numbers are 1-based.
    pub fn from_jsonl(name: impl Into<String>, bytes: &[u8], aliases: &SpeakerAliases) -> Result<Self, CorpusError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::MalformedLine {
            line: line_of_offset(bytes, e.valid_up_to()),
            reason: format!("invalid UTF-8: {e}"),
        })?;
        let mut dialogues = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.split('\n').enumerate() {
            let line_no = i + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let wire: DialogueWire = serde_json::from_str(line)
                .map_err(|e| CorpusError::MalformedLine { line: line_no, reason: e.to_string() })?;
            let d = wire_to_dialogue(wire, aliases).map_err(|e| match e {
                WireError::Alias(label) => CorpusError::UnknownSpeakerAlias { line: line_no, label },
                WireError::Dialogue(DialogueError::ReservedMarker { marker, .. }) => {
                    CorpusError::ReservedMarker { line: line_no, marker }
                }
                WireError::Dialogue(other) => CorpusError::MalformedLine { line: line_no, reason: other.to_string() },
            })?;
            if !seen.insert(d.id.clone()) {
                return Err(CorpusError::DuplicateId(d.id));
            }
            dialogues.push(d);
        }
        Ok(Corpus { name: name.into(), dialogues })
    }

    /// One line per dialogue, LF-terminated, in corpus order.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.dialogues {
            out.extend_from_slice(dialogue_json(d).as_bytes());
            out.push(b'\n');
        }
        out
    }
}

pub(crate) fn dialogue_json(d: &Dialogue) -> String {
    serde_json::to_string(d).expect("dialogue serialization is infallible")
}

fn line_of_offset(bytes: &[u8], offset: usize) -> usize {
    bytes[..offset].iter().filter(|b| **b == b'\n').count() + 1
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WindowError {
    #[error("window of at least {min_turns} turns does not fit a {len}-turn dialogue")]
    WindowTooLarge { min_turns: usize, len: usize },
    #[error("invalid window bounds: min {min_turns}, max {max_turns}, stride {stride}")]
    InvalidBounds { min_turns: usize, max_turns: usize, stride: usize },
}

/// Cuts contiguous sub-dialogues of `min_turns..=max_turns` turns.
///
/// Windows are `max_turns` long (or the dialogue length, if shorter) and
/// advance by `stride`, defaulting to the window length. A window that would
/// open on a therapist turn is shifted one turn right when the shifted window
/// still has room for `min_turns`. Tails shorter than `min_turns` are dropped.
pub fn extract_windows(
    dialogue: &Dialogue,
    min_turns: usize,
    max_turns: usize,
    stride: Option<usize>,
) -> Result<Vec<Dialogue>, WindowError> {
    let len = dialogue.len();
    let window = max_turns.min(len);
    let stride = stride.unwrap_or(window);
    if min_turns < 2 || min_turns > max_turns || stride == 0 {
        return Err(WindowError::InvalidBounds { min_turns, max_turns, stride });
    }
    if min_turns > len {
        return Err(WindowError::WindowTooLarge { min_turns, len });
    }
    let turns = dialogue.turns();
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        if turns[start].speaker == Speaker::Therapist && start + 1 + min_turns <= len {
            start += 1;
        }
        let size = window.min(len - start);
        if size < min_turns {
            break;
        }
        let slice = &turns[start..start + size];
        let sub = Dialogue::new(
            format!("{}#{}", dialogue.id(), start),
            dialogue.language(),
            slice.iter().map(|u| (u.speaker, u.text.as_str())),
        )
        .expect("window of a valid dialogue is valid");
        out.push(sub);
        start += stride;
    }
    Ok(out)
}

const CJK_PUNCTUATION: &str = "，。！？；：、“”‘’（）《》〈〉【】「」『』…—～·．";

fn is_allowed_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || CJK_PUNCTUATION.contains(c)
}

/// Ordered clean-up of generated text: whitespace, role prefixes, repeated
/// punctuation, then the character allow-list. Passes repeat until nothing
/// changes, which makes the result idempotent.
#[derive(Debug, Clone)]
pub struct PostProcessor {
    prefixes: Vec<String>,
}

impl PostProcessor {
    pub fn new(aliases: &SpeakerAliases) -> Self {
        let mut prefixes = aliases.labels();
        for label in ["patient", "therapist"] {
            if !prefixes.iter().any(|p| p == label) {
                prefixes.push(label.to_string());
            }
        }
        PostProcessor { prefixes }
    }

    pub fn process(&self, text: &str) -> String {
        let mut current = text.to_string();
        loop {
            let next = self.pass(&current);
            if next == current {
                return next;
            }
            current = next;
        }
    }

    fn pass(&self, text: &str) -> String {
        let collapsed = collapse_whitespace(text);
        let stripped = self.strip_prefixes(&collapsed);
        let deduped = collapse_punctuation(stripped);
        let allowed: String = deduped
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == ' ' || is_allowed_punctuation(*c))
            .collect();
        collapse_whitespace(&allowed)
    }

    fn strip_prefixes<'a>(&self, mut text: &'a str) -> &'a str {
        'outer: loop {
            for p in &self.prefixes {
                if let Some(rest) = strip_role_prefix(text, p) {
                    text = rest;
                    continue 'outer;
                }
            }
            return text;
        }
    }

    /// Splits a `Role: body` line into the resolved speaker and the body.
    pub fn split_role_line<'a>(&self, aliases: &SpeakerAliases, line: &'a str) -> Option<(Speaker, &'a str)> {
        let line = line.trim();
        for p in &self.prefixes {
            if let Some(rest) = strip_role_prefix(line, p) {
                if let Some(speaker) = aliases.resolve(p) {
                    return Some((speaker, rest));
                }
            }
        }
        None
    }
}

impl Default for PostProcessor {
    fn default() -> Self {
        PostProcessor::new(&SpeakerAliases::default())
    }
}

fn strip_role_prefix<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let head = text.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) && head.to_lowercase() != label {
        return None;
    }
    let rest = text[label.len()..].trim_start();
    let rest = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：'))?;
    Some(rest.trim_start())
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn collapse_punctuation(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev: Option<char> = None;
    for c in text.chars() {
        if Some(c) == prev && is_allowed_punctuation(c) {
            continue;
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

/// [`PostProcessor`] with the default alias table.
pub fn postprocess_text(text: &str) -> String {
    PostProcessor::default().process(text)
}

/// Outcome of one similarity-gated generation attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    TooSimilar,
    TooDivergent,
    ParseFailed,
    /// Direct-rewrite generation after the retry budget ran out; accepted unscored.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub similarity: Option<f64>,
    pub verdict: Verdict,
    #[serde(default)]
    pub injected_keyword: Option<String>,
    #[serde(default)]
    pub generated: Option<Dialogue>,
}

/// Audit trail of one source dialogue through the regeneration loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_id: String,
    pub attempts: Vec<Attempt>,
    pub fallback_used: bool,
    #[serde(rename = "final")]
    pub final_dialogue: Dialogue,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
}

pub fn records_to_jsonl(records: &[AugmentationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(serde_json::to_string(r).expect("record serialization is infallible").as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<AugmentationRecord>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| RecordError::Malformed { line: i + 1, source }))
        .collect()
}
