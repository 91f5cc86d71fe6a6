//! Psychological knowledge generator: k-shot knowledge blocks from graph
//! hits, single-line knowledge completion, utterance clustering with labels
//! and the labeled-dialogue knowledge prompt.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clustering::{kmeans, ClusterAssignment, ClusterError, MAX_CLUSTERS};
use crate::dialogue::{Dialogue, PostProcessor};
use crate::prompts::{PromptError, Prompter, PromptTemplateRegistry, TemplateError, TemplateName};
use crate::providers::{ChatProvider, ChatRequest, Decoding, Embedder, KnowledgeEntry, KnowledgeGraph, ProviderError};

pub const KNOWLEDGE_MARKER: &str = "<knowledge>";
pub const DEFAULT_SHOT_CAP: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("generated knowledge is empty")]
    EmptyKnowledge,
    #[error("query keyword is empty")]
    EmptyQuery,
    #[error("no label for cluster(s) {0:?}")]
    LabelParseError(Vec<usize>),
    #[error("dialogue has no utterances")]
    EmptyDialogue,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl From<PromptError> for KnowledgeError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Template(t) => KnowledgeError::Template(t),
            PromptError::Provider(p) => KnowledgeError::Provider(p),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KShotBlock {
    shots: Vec<KnowledgeEntry>,
    rendered: String,
}

impl KShotBlock {
    pub fn new(shots: Vec<KnowledgeEntry>) -> Self {
        let rendered = shots.iter().map(|s| format!("{}{KNOWLEDGE_MARKER}{}\n", s.keyword(), s.knowledge())).collect();
        KShotBlock { shots, rendered }
    }

    pub fn shots(&self) -> &[KnowledgeEntry] {
        &self.shots
    }

    pub fn k(&self) -> usize {
        self.shots.len()
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }
}

/// Looks every keyword up and keeps the first entry of each hit, up to `cap`
/// shots. Misses are dropped.
pub fn build_kshot_block(keywords: &[String], kg: &dyn KnowledgeGraph, cap: usize) -> Result<KShotBlock, ProviderError> {
    let mut shots = Vec::new();
    for kw in keywords {
        if shots.len() >= cap {
            break;
        }
        if let Some(first) = kg.lookup(kw)?.into_iter().next() {
            shots.push(first);
        }
    }
    Ok(KShotBlock::new(shots))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedKnowledge {
    pub text: String,
    pub source_keywords: Vec<String>,
}

/// The completion prompt: the rendered block followed by `query<knowledge>`.
pub fn knowledge_prompt(block: &KShotBlock, query: &str) -> String {
    format!("{}{}{KNOWLEDGE_MARKER}", block.rendered(), query.trim())
}

/// Completes `query<knowledge>` after the k-shot block and keeps the first
/// line of the reply.
pub fn generate_knowledge(
    block: &KShotBlock,
    query: &str,
    chat: &dyn ChatProvider,
    decoding: &Decoding,
    post: &PostProcessor,
) -> Result<GeneratedKnowledge, KnowledgeError> {
    if query.trim().is_empty() {
        return Err(KnowledgeError::EmptyQuery);
    }
    let request = ChatRequest::user(knowledge_prompt(block, query)).with_decoding(decoding).with_stop("\n");
    let reply = chat.chat(&request)?;
    let first_line = reply.split(['\n', '\r']).next().unwrap_or("");
    let text = post.process(first_line);
    if text.is_empty() {
        return Err(KnowledgeError::EmptyKnowledge);
    }
    let mut source_keywords: Vec<String> = block.shots().iter().map(|s| s.keyword().to_string()).collect();
    source_keywords.push(query.trim().to_string());
    Ok(GeneratedKnowledge { text, source_keywords })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeLabelSet {
    pub labels: BTreeMap<usize, String>,
    pub clusters: ClusterAssignment,
}

impl KnowledgeLabelSet {
    /// Label of the utterance at `turn`.
    pub fn label_of(&self, turn: usize) -> &str {
        self.clusters.labels.get(turn).and_then(|c| self.labels.get(c)).map(String::as_str).unwrap_or("")
    }
}

fn cluster_lines(dialogue: &Dialogue, clusters: &ClusterAssignment) -> String {
    (0..clusters.k)
        .map(|c| {
            let members: Vec<&str> = clusters.members(c).into_iter().map(|i| dialogue.turns()[i].text.as_str()).collect();
            format!("cluster {c}: {}", members.join(" | "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses `id: label` lines (full-width colon and a leading `cluster` word
/// are accepted). Later lines for the same id are ignored.
pub fn parse_labels(reply: &str) -> BTreeMap<usize, String> {
    let mut out = BTreeMap::new();
    for line in reply.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let line = line.strip_prefix("cluster").or_else(|| line.strip_prefix("Cluster")).unwrap_or(line).trim_start();
        let Some((id, label)) = line.split_once([':', '：']) else { continue };
        let (Ok(id), label) = (id.trim().parse::<usize>(), label.trim()) else { continue };
        if !label.is_empty() {
            out.entry(id).or_insert_with(|| label.to_string());
        }
    }
    out
}

/// Embeds the utterances, clusters them into at most five groups and asks
/// the chat model for one label per cluster.
pub fn label_clusters(
    dialogue: &Dialogue,
    knowledge: &[GeneratedKnowledge],
    embedder: &dyn Embedder,
    prompter: &Prompter<'_>,
    seed: u64,
) -> Result<KnowledgeLabelSet, KnowledgeError> {
    if dialogue.is_empty() {
        return Err(KnowledgeError::EmptyDialogue);
    }
    let texts: Vec<String> = dialogue.turns().iter().map(|u| u.text.clone()).collect();
    let clusters = kmeans(&embedder.embed(&texts)?, MAX_CLUSTERS, seed)?;
    let knowledge_text: Vec<&str> = knowledge.iter().map(|k| k.text.as_str()).collect();
    let (_, reply) = prompter.ask(
        TemplateName::LabelPrompt,
        &[("clusters", &cluster_lines(dialogue, &clusters)), ("knowledge", &knowledge_text.join("\n"))],
    )?;
    let mut parsed = parse_labels(&reply);
    let missing: Vec<usize> = (0..clusters.k).filter(|c| !parsed.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(KnowledgeError::LabelParseError(missing));
    }
    parsed.retain(|c, _| *c < clusters.k);
    Ok(KnowledgeLabelSet { labels: parsed, clusters })
}

/// The dialogue with every utterance prefixed by its cluster label.
pub fn labeled_transcript(dialogue: &Dialogue, labels: &KnowledgeLabelSet) -> String {
    dialogue
        .turns()
        .iter()
        .enumerate()
        .map(|(i, u)| format!("[{}] {}: {}", labels.label_of(i), u.speaker, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_pk_prompt(
    block: &KShotBlock,
    dialogue: &Dialogue,
    labels: &KnowledgeLabelSet,
    registry: &PromptTemplateRegistry,
) -> Result<String, TemplateError> {
    registry.render(
        TemplateName::PkPrompt,
        &[("kshot", block.rendered()), ("dialogue", &labeled_transcript(dialogue, labels))],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{Language, Speaker};
    use crate::providers::mock::{ScriptedChat, StaticKnowledgeGraph, TableEmbedder};
    use crate::providers::HashEmbedder;
    use proptest::prelude::*;

    fn kws(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn gen(reply: &str) -> Result<GeneratedKnowledge, KnowledgeError> {
        generate_knowledge(&KShotBlock::default(), "焦虑", &ScriptedChat::always(reply), &Decoding::default(), &PostProcessor::default())
    }

    #[test]
    fn kshot_block_keeps_hits_only() {
        let kg = StaticKnowledgeGraph::from_json(r#"{"焦虑":["X","Y"],"失眠":"Z"}"#).unwrap();
        let b = build_kshot_block(&kws(&["焦虑", "未知", "失眠"]), &kg, 8).unwrap();
        assert_eq!(b.k(), 2);
        assert_eq!(b.rendered(), "焦虑<knowledge>X\n失眠<knowledge>Z\n");
        assert_eq!(b.rendered().lines().count(), b.k());

        let none = build_kshot_block(&kws(&["未知"]), &kg, 8).unwrap();
        assert_eq!((none.k(), none.rendered()), (0, ""));
        assert_eq!(build_kshot_block(&kws(&["焦虑", "失眠"]), &kg, 1).unwrap().k(), 1);
    }

    #[test]
    fn knowledge_is_first_line() {
        assert_eq!(gen("是一种持续担忧\nkeyword_x<knowledge>...").unwrap().text, "是一种持续担忧");
        assert_eq!(gen("A").unwrap().text, "A");
        assert_eq!(gen("\n"), Err(KnowledgeError::EmptyKnowledge));
    }

    #[test]
    fn knowledge_prompt_layout() {
        let b = KShotBlock::new(vec![KnowledgeEntry::new("a", "x").unwrap()]);
        assert_eq!(knowledge_prompt(&b, "q"), "a<knowledge>x\nq<knowledge>");
    }

    fn dialogue(texts: &[&str]) -> Dialogue {
        Dialogue::new(
            "d",
            Language::Zh,
            texts.iter().enumerate().map(|(i, t)| (if i % 2 == 0 { Speaker::Patient } else { Speaker::Therapist }, *t)),
        )
        .unwrap()
    }

    fn prompter_run<T>(reply: &str, f: impl FnOnce(&Prompter<'_>) -> T) -> T {
        let chat = ScriptedChat::always(reply);
        let reg = PromptTemplateRegistry::default();
        let dec = Decoding::default();
        f(&Prompter::new(&chat, &reg, &dec))
    }

    #[test]
    fn labels_cover_every_cluster() {
        let d = dialogue(&["我睡不好", "我睡不好"]);
        let got = prompter_run("0: 睡眠问题", |p| label_clusters(&d, &[], &HashEmbedder::default(), p, 0)).unwrap();
        assert_eq!(got.clusters.k, 1);
        assert_eq!(got.labels[&0], "睡眠问题");

        let six = dialogue(&["a", "b", "c", "d", "e", "f"]);
        let reply = "0: A\n1：B\ncluster 2: C\n3: D\n4: E";
        let got = prompter_run(reply, |p| label_clusters(&six, &[], &HashEmbedder::default(), p, 0)).unwrap();
        assert_eq!(got.clusters.k, 5);
        assert_eq!(got.labels.len(), 5);

        let err = prompter_run("0: A\n1: B\n3: D\n4: E", |p| label_clusters(&six, &[], &HashEmbedder::default(), p, 0));
        assert_eq!(err, Err(KnowledgeError::LabelParseError(vec![2])));
    }

    #[test]
    fn pk_prompt_annotates_turns() {
        let d = dialogue(&["我很担心考试", "担心什么呢"]);
        let emb = TableEmbedder::new([("我很担心考试", vec![0.0]), ("担心什么呢", vec![0.0])]);
        let labels = prompter_run("0: 焦虑", |p| label_clusters(&d, &[], &emb, p, 0)).unwrap();
        let reg = PromptTemplateRegistry::default();
        let p = build_pk_prompt(&KShotBlock::default(), &d, &labels, &reg).unwrap();
        assert!(p.contains("[焦虑] Patient: 我很担心考试\n[焦虑] Therapist: 担心什么呢"));
        assert!(!p.contains("Knowledge:"));
        assert_eq!(p, build_pk_prompt(&KShotBlock::default(), &d, &labels, &reg).unwrap());
    }

    proptest! {
        #[test]
        fn knowledge_never_contains_newline(reply in "[a-z\n\r<>焦虑 ]{0,40}") {
            match gen(&reply) {
                Ok(k) => prop_assert!(!k.text.contains('\n') && !k.text.is_empty()),
                Err(e) => prop_assert_eq!(e, KnowledgeError::EmptyKnowledge),
            }
        }
    }
}
