use std::path::{Path, PathBuf};
use std::sync::Arc;

use kpt::dialogue::{records_from_jsonl, Corpus, PostProcessor, SpeakerAliases, Verdict};
use kpt::pipeline::run::{run_augmentation, RunError, RunManifest, RunOptions, Status, AUGMENTED, MANIFEST, RECORDS};
use kpt::pipeline::{mock_providers, Augmenter, PipelineConfig};
use kpt::prompts::{PromptTemplateRegistry, Prompter};
use kpt::providers::mock::{FixtureChat, RecordingChat, StaticKnowledgeGraph};
use kpt::providers::{ChatProvider, ChatRequest, Decoding, ProviderError, Providers};
use kpt::thought::{build_thought_database, ThoughtDatabase};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/basic")
}

fn corpus() -> Corpus {
    let bytes = std::fs::read(fixture().join("corpus.jsonl")).unwrap();
    Corpus::from_jsonl("corpus", &bytes, &SpeakerAliases::default()).unwrap()
}

fn config() -> PipelineConfig {
    PipelineConfig::from_json(&std::fs::read_to_string(fixture().join("config.json")).unwrap()).unwrap()
}

fn providers() -> Providers {
    let kg = StaticKnowledgeGraph::from_json(&std::fs::read_to_string(fixture().join("kg.json")).unwrap()).unwrap();
    mock_providers(kg)
}

fn database(providers: &Providers) -> ThoughtDatabase {
    let registry = PromptTemplateRegistry::default();
    let decoding = Decoding::default();
    let prompter = Prompter::new(providers.chat.as_ref(), &registry, &decoding);
    build_thought_database(&corpus(), &prompter, &PostProcessor::default(), 1).unwrap().0
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn interrupted_run_resumes_remaining_dialogues() {
    let p = providers();
    let augmenter = Augmenter::new(config(), p.clone(), database(&p)).unwrap();
    let corpus = corpus();
    let dir = tempfile::tempdir().unwrap();

    let first = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions { stop_after: Some(3) }).unwrap();
    assert_eq!((first.processed, first.done, first.pending), (3, 3, 2));
    let m = manifest(dir.path());
    assert_eq!(m.count(Status::Done), 3);
    assert_eq!(m.count(Status::Pending), 2);

    let second = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!((second.processed, second.done, second.pending), (2, 5, 0));
    assert!(second.metrics.is_some());

    // resuming gives the same files as an uninterrupted run
    let golden = fixture().join("golden");
    for name in [AUGMENTED, RECORDS, MANIFEST] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(golden.join(name)).unwrap(), "{name}");
    }

    let third = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(third.processed, 0);
}

/// Fails every request that mentions `needle`.
struct FailingFor {
    inner: FixtureChat,
    needle: &'static str,
}

impl ChatProvider for FailingFor {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        if request.messages.iter().any(|m| m.content.contains(self.needle)) {
            return Err(ProviderError::Protocol("scripted outage".into()));
        }
        self.inner.chat(request)
    }
}

#[test]
fn failed_dialogues_are_retried_on_resume() {
    let good = providers();
    let db = database(&good);
    let mut broken = good.clone();
    broken.chat = Arc::new(FailingFor { inner: FixtureChat::new(), needle: "drinking" });
    let corpus = corpus();
    let dir = tempfile::tempdir().unwrap();

    let augmenter = Augmenter::new(config(), broken, db.clone()).unwrap();
    let first = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).unwrap();
    assert!(first.failed >= 1, "{first:?}");
    let m = manifest(dir.path());
    let failed: Vec<_> = m.dialogues.iter().filter(|d| d.status == Status::Failed).collect();
    assert!(failed.iter().all(|d| d.error.as_deref().is_some_and(|e| e.contains("scripted outage"))));

    let augmenter = Augmenter::new(config(), good, db).unwrap();
    let second = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(second.processed, first.failed);
    assert_eq!((second.done, second.failed, second.pending), (5, 0, 0));
}

#[test]
fn resuming_with_a_different_config_is_refused() {
    let p = providers();
    let db = database(&p);
    let corpus = corpus();
    let dir = tempfile::tempdir().unwrap();
    let augmenter = Augmenter::new(config(), p.clone(), db.clone()).unwrap();
    run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions { stop_after: Some(1) }).unwrap();

    let mut changed = config();
    changed.punishment.max_retries = 1;
    let augmenter = Augmenter::new(changed, p.clone(), db.clone()).unwrap();
    let err = run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, RunError::ManifestMismatch(_, "configuration")), "{err}");

    // worker count is not part of the fingerprint
    let mut more_workers = config();
    more_workers.workers = 3;
    let augmenter = Augmenter::new(more_workers, p, db).unwrap();
    assert!(run_augmentation(&augmenter, &corpus, dir.path(), &RunOptions::default()).is_ok());
}

#[test]
fn all_stages_disabled_is_a_single_direct_rewrite() {
    let p = providers();
    let db = database(&p);
    let recording = Arc::new(RecordingChat::new(Arc::new(FixtureChat::new())));
    let mut p = p;
    p.chat = recording.clone();
    let mut cfg = config();
    cfg.ablation.disable_thought = true;
    cfg.ablation.disable_knowledge = true;
    cfg.ablation.disable_punishment = true;
    assert_eq!(cfg.ablation.name(), "direct");
    let augmenter = Augmenter::new(cfg, p, db).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_augmentation(&augmenter, &corpus(), dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(summary.done, 5);

    let records = records_from_jsonl(&std::fs::read_to_string(dir.path().join(RECORDS)).unwrap()).unwrap();
    for r in &records {
        assert_eq!(r.attempts.len(), 1, "{}", r.source_id);
        assert!(!r.fallback_used);
        assert_eq!(r.attempts[0].verdict, Verdict::Accepted);
    }
    let requests = recording.requests();
    assert_eq!(requests.len(), 5);
    assert!(requests.iter().all(|r| r.messages.len() == 1 && r.prompt().starts_with("### task: direct-rewrite")));
}

#[test]
fn punishment_off_keeps_one_attempt_per_dialogue() {
    let p = providers();
    let db = database(&p);
    let mut cfg = config();
    cfg.ablation.disable_punishment = true;
    let augmenter = Augmenter::new(cfg, p, db).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_augmentation(&augmenter, &corpus(), dir.path(), &RunOptions::default()).unwrap();
    let records = records_from_jsonl(&std::fs::read_to_string(dir.path().join(RECORDS)).unwrap()).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.attempts.len() == 1 && r.attempts[0].injected_keyword.is_none()));
}
