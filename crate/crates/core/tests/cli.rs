use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kpt::cli::{EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use kpt::dialogue::{Corpus, Speaker, SpeakerAliases};
use kpt::pipeline::run::{RunManifest, Status, MANIFEST};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/basic")
}

fn kpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpt")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(kpt(&["frobnicate"]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(kpt(&["augment"]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(kpt(&["--help"]).status.code(), Some(EXIT_OK));
    let o = kpt(&["evaluate", "--generated", "/nonexistent/a.jsonl", "--original", "/nonexistent/b.jsonl"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("/nonexistent/a.jsonl"));
}

#[test]
fn missing_endpoint_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"providers": {"chat": {"model_id": "m"}}}"#).unwrap();
    let out = dir.path().join("db.jsonl");
    let o = kpt(&["build-thought-db", "--config", s(&config), "--in", s(&fixture().join("corpus.jsonl")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("providers.chat.endpoint"), "{}", stderr(&o));
    assert!(!out.exists());

    std::fs::write(&config, r#"{"providers": {"chat": {"endpoint": "http://h"}}, "punishment": {"lower_threshold": 0.95}}"#).unwrap();
    let o = kpt(&["augment", "--config", s(&config), "--in", s(&fixture().join("corpus.jsonl")), "--out", s(&out), "--disable-thought"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("punishment"), "{}", stderr(&o));
}

#[test]
fn augment_requires_a_database_unless_thought_is_off() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture().join("corpus.jsonl");
    let o = kpt(&["augment", "--config", s(&fixture().join("config.json")), "--in", s(&corpus), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("--db"));
}

#[test]
fn unreachable_chat_endpoint_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"providers": {"chat": {"endpoint": "http://127.0.0.1:9/v1/chat/completions", "max_attempts": 1, "timeout_ms": 2000}}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = kpt(&["augment", "--config", s(&config), "--in", s(&fixture().join("corpus.jsonl")), "--out", s(&out), "--disable-thought", "--stop-after", "2"]);
    assert_eq!(o.status.code(), Some(EXIT_PARTIAL), "{}", stderr(&o));
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(out.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.ablation, "no_thought");
    assert_eq!(manifest.count(Status::Failed), 2);
    assert_eq!(manifest.count(Status::Pending), 3);
}

#[test]
fn ingest_normalizes_labels_and_cuts_windows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"id":"a","language":"en","turns":[{"speaker":"Client","text":"I can't sleep."},{"speaker":"coach","text":"Since when?"},"#,
            r#"{"speaker":"client","text":"A month."},{"speaker":"coach","text":"What changed?"},{"speaker":"client","text":"Work."}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let aliases = dir.path().join("aliases.json");
    std::fs::write(&aliases, r#"{"coach": "therapist"}"#).unwrap();
    let out = dir.path().join("out.jsonl");

    let o = kpt(&["ingest", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG), "coach is unknown without the alias file");

    let o = kpt(&["ingest", "--in", s(&input), "--out", s(&out), "--aliases", s(&aliases)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", stderr(&o));
    let corpus = Corpus::from_jsonl("out", &std::fs::read(&out).unwrap(), &SpeakerAliases::default()).unwrap();
    let speakers: Vec<Speaker> = corpus.dialogues()[0].turns().iter().map(|u| u.speaker).collect();
    assert_eq!(speakers, [Speaker::Patient, Speaker::Therapist, Speaker::Patient, Speaker::Therapist, Speaker::Patient]);

    let o = kpt(&["ingest", "--in", s(&input), "--out", s(&out), "--aliases", s(&aliases), "--window-min", "2", "--window-max", "2"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", stderr(&o));
    let corpus = Corpus::from_jsonl("out", &std::fs::read(&out).unwrap(), &SpeakerAliases::default()).unwrap();
    let ids: Vec<&str> = corpus.dialogues().iter().map(|d| d.id()).collect();
    assert_eq!(ids, ["a#0", "a#2"]);
    assert!(corpus.dialogues().iter().all(|d| d.turns()[0].speaker == Speaker::Patient));
}

#[test]
fn evaluate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture().join("corpus.jsonl");
    let csv = dir.path().join("m.csv");
    let o = kpt(&["evaluate", "--generated", s(&corpus), "--original", s(&corpus), "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("B-1,B-2,B-3,B-4,D-1,D-2\n100.00,100.00,100.00,100.00,"), "{text}");

    let golden = fixture().join("golden/augmented.jsonl");
    let o = kpt(&["evaluate", "--generated", s(&golden), "--original", s(&corpus), "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(fixture().join("golden/metrics.csv")).unwrap());
}

#[test]
fn mock_run_matches_golden_and_reports_drift() {
    let dir = tempfile::tempdir().unwrap();
    let o = kpt(&["mock-run", "--fixture", s(&fixture()), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", stderr(&o));

    let o = kpt(&["mock-run", "--fixture", s(&fixture()), "--out", s(dir.path()), "--seed", "8"]);
    assert_eq!(o.status.code(), Some(EXIT_PARTIAL));
    assert!(stderr(&o).contains("golden mismatch"), "{}", stderr(&o));
}

#[test]
fn thought_database_from_cli_matches_mock_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = kpt(&["mock-run", "--fixture", s(&fixture()), "--out", s(dir.path()), "--disable-punishment"]);
    // a different ablation drifts from golden, but the database does not depend on it
    assert_eq!(o.status.code(), Some(EXIT_PARTIAL));
    assert_eq!(
        std::fs::read(dir.path().join(kpt::cli::THOUGHTS)).unwrap(),
        std::fs::read(fixture().join("golden").join(kpt::cli::THOUGHTS)).unwrap()
    );
}
