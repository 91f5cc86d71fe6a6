//! Named prompt templates and a small placeholder renderer.
//!
//! Template syntax: `{name}` is replaced by a value, `{#name}...{/name}` is
//! kept only when `name` is non-empty, and `{{` / `}}` are literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ChatProvider, ChatRequest, Decoding, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    KwPrompt,
    UlPrompt,
    MtPrompt,
    PkPrompt,
    MtdPrompt,
    PtKePrompt,
    ChatgptPrompt,
    LabelPrompt,
    PtFrame,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::KwPrompt,
        TemplateName::UlPrompt,
        TemplateName::MtPrompt,
        TemplateName::PkPrompt,
        TemplateName::MtdPrompt,
        TemplateName::PtKePrompt,
        TemplateName::ChatgptPrompt,
        TemplateName::LabelPrompt,
        TemplateName::PtFrame,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::KwPrompt => "kw_prompt",
            TemplateName::UlPrompt => "ul_prompt",
            TemplateName::MtPrompt => "mt_prompt",
            TemplateName::PkPrompt => "pk_prompt",
            TemplateName::MtdPrompt => "mtd_prompt",
            TemplateName::PtKePrompt => "pt_ke_prompt",
            TemplateName::ChatgptPrompt => "chatgpt_prompt",
            TemplateName::LabelPrompt => "label_prompt",
            TemplateName::PtFrame => "pt_frame",
        }
    }

    pub fn parse(name: &str) -> Option<TemplateName> {
        Self::ALL.into_iter().find(|n| n.as_str() == name)
    }

    /// Placeholders the pipeline fills for this template; each must appear in it.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::KwPrompt => &["dialogue"],
            TemplateName::UlPrompt | TemplateName::MtPrompt => &["exemplars", "dialogue"],
            TemplateName::PkPrompt => &["kshot", "dialogue"],
            TemplateName::MtdPrompt => &["dialogue", "thought", "knowledge", "keywords"],
            TemplateName::PtKePrompt => &["thought"],
            TemplateName::ChatgptPrompt => &["dialogue"],
            TemplateName::LabelPrompt => &["clusters", "knowledge"],
            TemplateName::PtFrame => &["combinations"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateName::KwPrompt => {
                "### task: keywords\n\
                 Read the counseling dialogue below and list its key psychological keywords.\n\
                 Reply with the keywords only, separated by commas.\n\
                 <dialogue>\n{dialogue}\n</dialogue>\n"
            }
            TemplateName::UlPrompt => {
                "### task: utterance-thought\n\
                 {#exemplars}{exemplars}\n\n{/exemplars}\
                 Write the therapist's progressive thought that links the patient utterance to the therapist reply below. \
                 Answer with one sentence.\n\
                 <dialogue>\n{dialogue}\n</dialogue>\n"
            }
            TemplateName::MtPrompt => {
                "### task: multiturn-thought\n\
                 {#exemplars}{exemplars}\n\n{/exemplars}\
                 Write the therapist's progressive thought that carries through the multi-turn dialogue below. \
                 Answer with one sentence.\n\
                 <dialogue>\n{dialogue}\n</dialogue>\n"
            }
            TemplateName::LabelPrompt => {
                "### task: labels\n\
                 The utterances of a counseling dialogue were grouped into clusters.\n\
                 {#knowledge}Psychological knowledge:\n{knowledge}\n\n{/knowledge}\
                 Clusters:\n{clusters}\n\n\
                 Give every cluster a short psychological label, one line per cluster, formatted as `cluster_id: label`.\n"
            }
            TemplateName::PkPrompt => {
                "### task: psych-knowledge\n\
                 {#kshot}Knowledge:\n{kshot}\n{/kshot}\
                 Labeled dialogue:\n<dialogue>\n{dialogue}\n</dialogue>\n\
                 Summarize the psychological knowledge that matters for this dialogue in one paragraph.\n"
            }
            TemplateName::PtFrame => {
                "Progressive thought examples \
                 (patient utterance<thought_prior>thought<thought_next>therapist reply):\n\n{combinations}"
            }
            TemplateName::MtdPrompt => {
                "### task: rewrite\n\
                 Rewrite the counseling dialogue below into a new multi-turn dialogue that keeps its meaning and psychological focus.\n\
                 {#thought}\nProgressive thought:\n{thought}\n{/thought}\
                 {#knowledge}\nPsychological knowledge:\n{knowledge}\n{/knowledge}\
                 {#keywords}\nMake sure the dialogue mentions: {keywords}\n{/keywords}\
                 \n<dialogue>\n{dialogue}\n</dialogue>\n\
                 Write one turn per line, starting each line with `Patient:` or `Therapist:`.\n"
            }
            TemplateName::PtKePrompt => {
                "### task: thought-keywords\n\
                 Extract the keywords of the progressive thought below. Reply with the keywords only, separated by commas.\n\
                 <thought>\n{thought}\n</thought>\n"
            }
            TemplateName::ChatgptPrompt => {
                "### task: direct-rewrite\n\
                 Rewrite the counseling dialogue below into a new multi-turn dialogue.\n\
                 <dialogue>\n{dialogue}\n</dialogue>\n\
                 Write one turn per line, starting each line with `Patient:` or `Therapist:`.\n"
            }
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: {reason}")]
    Syntax { template: String, reason: String },
    #[error("template {template} does not reference placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: TemplateName, placeholder: &'static str },
    #[error("template {template} references {{{placeholder}}} which has no value")]
    UnboundPlaceholder { template: TemplateName, placeholder: String },
    #[error("unknown template name {0:?}")]
    UnknownName(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Var(String),
    Section(String, Vec<Segment>),
}

fn parse_template(src: &str) -> Result<Vec<Segment>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut pos = 0;
    let segments = parse_segments(&chars, &mut pos, None)?;
    Ok(segments)
}

fn parse_segments(chars: &[char], pos: &mut usize, closing: Option<&str>) -> Result<Vec<Segment>, String> {
    let mut out = Vec::new();
    let mut text = String::new();
    while *pos < chars.len() {
        let c = chars[*pos];
        match c {
            '{' if chars.get(*pos + 1) == Some(&'{') => {
                text.push('{');
                *pos += 2;
            }
            '}' if chars.get(*pos + 1) == Some(&'}') => {
                text.push('}');
                *pos += 2;
            }
            '{' => {
                let end = chars[*pos..].iter().position(|c| *c == '}').ok_or("unclosed `{`")? + *pos;
                let tag: String = chars[*pos + 1..end].iter().collect();
                *pos = end + 1;
                if !text.is_empty() {
                    out.push(Segment::Text(std::mem::take(&mut text)));
                }
                if let Some(name) = tag.strip_prefix('#') {
                    let inner = parse_segments(chars, pos, Some(name))?;
                    out.push(Segment::Section(name.to_string(), inner));
                } else if let Some(name) = tag.strip_prefix('/') {
                    return if closing == Some(name) {
                        Ok(out)
                    } else {
                        Err(format!("unexpected closing tag {{/{name}}}"))
                    };
                } else if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(format!("invalid placeholder {{{tag}}}"));
                } else {
                    out.push(Segment::Var(tag));
                }
            }
            '}' => return Err("unmatched `}`".into()),
            _ => {
                text.push(c);
                *pos += 1;
            }
        }
    }
    if let Some(name) = closing {
        return Err(format!("section {{#{name}}} is never closed"));
    }
    if !text.is_empty() {
        out.push(Segment::Text(text));
    }
    Ok(out)
}

fn collect_names(segments: &[Segment], names: &mut BTreeSet<String>) {
    for s in segments {
        match s {
            Segment::Text(_) => {}
            Segment::Var(n) => {
                names.insert(n.clone());
            }
            Segment::Section(n, inner) => {
                names.insert(n.clone());
                collect_names(inner, names);
            }
        }
    }
}

fn render_segments(
    template: TemplateName,
    segments: &[Segment],
    values: &BTreeMap<&str, &str>,
    out: &mut String,
) -> Result<(), TemplateError> {
    for s in segments {
        match s {
            Segment::Text(t) => out.push_str(t),
            Segment::Var(n) | Segment::Section(n, _) => {
                let value = values
                    .get(n.as_str())
                    .ok_or_else(|| TemplateError::UnboundPlaceholder { template, placeholder: n.clone() })?;
                match s {
                    Segment::Var(_) => out.push_str(value),
                    Segment::Section(_, inner) if !value.is_empty() => render_segments(template, inner, values, out)?,
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Template {
    source: String,
    segments: Vec<Segment>,
}

/// All prompt templates the pipeline renders, validated on construction.
#[derive(Debug, Clone)]
pub struct PromptTemplateRegistry {
    templates: BTreeMap<TemplateName, Template>,
}

impl PromptTemplateRegistry {
    /// Defaults with `overrides` (template name → source) applied on top.
    pub fn with_overrides(overrides: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        let mut sources: BTreeMap<TemplateName, String> =
            TemplateName::ALL.iter().map(|n| (*n, n.default_text().to_string())).collect();
        for (name, src) in overrides {
            let parsed = TemplateName::parse(name).ok_or_else(|| TemplateError::UnknownName(name.clone()))?;
            sources.insert(parsed, src.clone());
        }
        let mut templates = BTreeMap::new();
        for (name, source) in sources {
            let segments = parse_template(&source)
                .map_err(|reason| TemplateError::Syntax { template: name.to_string(), reason })?;
            let mut names = BTreeSet::new();
            collect_names(&segments, &mut names);
            for p in name.placeholders() {
                if !names.contains(*p) {
                    return Err(TemplateError::MissingPlaceholder { template: name, placeholder: p });
                }
            }
            templates.insert(name, Template { source, segments });
        }
        Ok(PromptTemplateRegistry { templates })
    }

    pub fn source(&self, name: TemplateName) -> &str {
        &self.templates[&name].source
    }

    pub fn render(&self, name: TemplateName, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<&str, &str> = values.iter().copied().collect();
        let mut out = String::new();
        render_segments(name, &self.templates[&name].segments, &map, &mut out)?;
        Ok(out)
    }
}

impl Default for PromptTemplateRegistry {
    fn default() -> Self {
        PromptTemplateRegistry::with_overrides(&BTreeMap::new()).expect("default templates are valid")
    }
}

/// Renders registry templates and sends them to a chat provider.
#[derive(Clone, Copy)]
pub struct Prompter<'a> {
    pub chat: &'a dyn ChatProvider,
    pub registry: &'a PromptTemplateRegistry,
    pub decoding: &'a Decoding,
}

impl<'a> Prompter<'a> {
    pub fn new(chat: &'a dyn ChatProvider, registry: &'a PromptTemplateRegistry, decoding: &'a Decoding) -> Self {
        Prompter { chat, registry, decoding }
    }

    /// Renders `name` and returns `(prompt, reply)`.
    pub fn ask(&self, name: TemplateName, values: &[(&str, &str)]) -> Result<(String, String), PromptError> {
        let prompt = self.registry.render(name, values)?;
        let reply = self.chat.chat(&ChatRequest::user(prompt.clone()).with_decoding(self.decoding))?;
        Ok((prompt, reply))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// First-line task tag of the default templates (`### task: <tag>`).
pub fn task_tag(prompt: &str) -> Option<&str> {
    prompt.lines().next()?.strip_prefix("### task:").map(str::trim)
}
