//! Run directories: manifest, durable per-dialogue state, resumption and
//! the final output files.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Augmenter, DialogueOutcome};
use crate::dialogue::{records_from_jsonl, records_to_jsonl, AugmentationRecord, Corpus, Dialogue, Verdict};
use crate::metrics::{evaluate_corpus, MetricReport};
use crate::parallel::parallel_map;

pub const MANIFEST: &str = "manifest.json";
pub const AUGMENTED: &str = "augmented.jsonl";
pub const RECORDS: &str = "records.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub augmented: String,
    pub records: String,
    pub metrics: String,
    pub report: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { augmented: AUGMENTED.into(), records: RECORDS.into(), metrics: METRICS.into(), report: REPORT.into() }
    }
}

/// Paths in `outputs` are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub corpus_hash: String,
    pub database_hash: String,
    pub ablation: String,
    pub outputs: Outputs,
    /// Sorted by dialogue id.
    pub dialogues: Vec<DialogueState>,
}

impl RunManifest {
    pub fn count(&self, status: Status) -> usize {
        self.dialogues.iter().filter(|d| d.status == status).count()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("{0} was written for a different {1}; use a fresh output directory")]
    ManifestMismatch(PathBuf, &'static str),
    #[error("records file {path}: {reason}")]
    CorruptRecords { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Process at most this many dialogues in this invocation and leave the
    /// rest pending.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub processed: usize,
    pub done: usize,
    pub failed: usize,
    pub pending: usize,
    pub metrics: Option<MetricReport>,
}

struct State {
    manifest: RunManifest,
    records: BTreeMap<String, AugmentationRecord>,
}

impl State {
    fn persist(&self, dir: &Path) -> Result<(), RunError> {
        let records: Vec<AugmentationRecord> = self.records.values().cloned().collect();
        write_atomic(&dir.join(&self.manifest.outputs.records), &records_to_jsonl(&records))?;
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialization is infallible");
        write_atomic(&dir.join(MANIFEST), format!("{json}\n").as_bytes())
    }
}

fn load_or_create(dir: &Path, fresh: RunManifest) -> Result<State, RunError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(State { manifest: fresh, records: BTreeMap::new() });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| RunError::CorruptManifest { path: path.clone(), reason: e.to_string() })?;
    if manifest.config_hash != fresh.config_hash {
        return Err(RunError::ManifestMismatch(path, "configuration"));
    }
    if manifest.corpus_hash != fresh.corpus_hash {
        return Err(RunError::ManifestMismatch(path, "corpus"));
    }
    if manifest.database_hash != fresh.database_hash {
        return Err(RunError::ManifestMismatch(path, "thought database"));
    }
    let expected: Vec<&str> = fresh.dialogues.iter().map(|d| d.id.as_str()).collect();
    let found: Vec<&str> = manifest.dialogues.iter().map(|d| d.id.as_str()).collect();
    if expected != found {
        return Err(RunError::CorruptManifest { path, reason: "dialogue list does not match the corpus".into() });
    }
    let records_path = dir.join(&manifest.outputs.records);
    let mut records = BTreeMap::new();
    if records_path.exists() {
        let text = fs::read_to_string(&records_path).map_err(io_err(&records_path))?;
        for r in records_from_jsonl(&text)
            .map_err(|e| RunError::CorruptRecords { path: records_path.clone(), reason: e.to_string() })?
        {
            records.insert(r.source_id.clone(), r);
        }
    }
    // a done entry without its record is redone
    for d in &mut manifest.dialogues {
        if d.status == Status::Done && !records.contains_key(&d.id) {
            warn!("{}: record missing, marking pending", d.id);
            d.status = Status::Pending;
        }
    }
    records.retain(|id, _| manifest.dialogues.iter().any(|d| &d.id == id && d.status == Status::Done));
    Ok(State { manifest, records })
}

fn report_text(manifest: &RunManifest, records: &BTreeMap<String, AugmentationRecord>, metrics: Option<&MetricReport>) -> String {
    let mut out = String::new();
    out.push_str(&format!("variant: {}\n", manifest.ablation));
    out.push_str(&format!(
        "dialogues: {} done, {} failed, {} pending\n",
        manifest.count(Status::Done),
        manifest.count(Status::Failed),
        manifest.count(Status::Pending)
    ));
    let fallbacks = records.values().filter(|r| r.fallback_used).count();
    let attempts: usize = records.values().map(|r| r.attempts.len()).sum();
    out.push_str(&format!("attempts: {attempts} total, {fallbacks} fallback rewrite(s)\n\n"));
    for d in &manifest.dialogues {
        let detail = match (d.status, records.get(&d.id)) {
            (Status::Done, Some(r)) => {
                let trace: Vec<String> = r
                    .attempts
                    .iter()
                    .map(|a| match (a.verdict, a.similarity) {
                        (Verdict::Fallback, _) => "fallback".to_string(),
                        (Verdict::ParseFailed, _) => "parse_failed".to_string(),
                        (v, Some(s)) => format!("{}({s:.3})", serde_json::to_value(v).expect("verdict").as_str().unwrap_or("")),
                        (v, None) => format!("{v:?}"),
                    })
                    .collect();
                format!("done  {}", trace.join(" -> "))
            }
            (Status::Failed, _) => format!("FAILED  {}", d.error.as_deref().unwrap_or("")),
            _ => "pending".to_string(),
        };
        out.push_str(&format!("{}  {detail}\n", d.id));
        for note in &d.notes {
            out.push_str(&format!("    note: {note}\n"));
        }
    }
    match metrics {
        Some(m) => out.push_str(&format!("\n{}", m.to_table())),
        None => out.push_str("\nno metrics: no dialogue completed\n"),
    }
    out
}

/// Augments every pending or failed dialogue of `corpus` into `dir`,
/// resuming from an existing manifest, then writes the output files.
pub fn run_augmentation(augmenter: &Augmenter, corpus: &Corpus, dir: &Path, options: &RunOptions) -> Result<RunSummary, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut ids: Vec<&str> = corpus.dialogues().iter().map(|d| d.id()).collect();
    ids.sort_unstable();
    let fresh = RunManifest {
        config_hash: augmenter.config.fingerprint(),
        corpus_hash: sha_hex(&corpus.to_jsonl()),
        database_hash: sha_hex(&augmenter.database.to_jsonl()),
        ablation: augmenter.config.ablation.name().to_string(),
        outputs: Outputs::default(),
        dialogues: ids
            .iter()
            .map(|id| DialogueState { id: id.to_string(), status: Status::Pending, error: None, notes: Vec::new() })
            .collect(),
    };
    let state = load_or_create(dir, fresh)?;
    state.persist(dir)?;

    let mut todo: Vec<&Dialogue> = state
        .manifest
        .dialogues
        .iter()
        .filter(|d| d.status != Status::Done)
        .map(|d| corpus.get(&d.id).expect("manifest ids come from the corpus"))
        .collect();
    if let Some(limit) = options.stop_after {
        todo.truncate(limit);
    }
    info!("{} dialogue(s) to process with {} worker(s)", todo.len(), augmenter.config.workers);

    let state = Mutex::new(state);
    let persisted = parallel_map(&todo, augmenter.config.workers, |d| {
        let outcome = augmenter.augment(d);
        let mut st = state.lock().expect("run state poisoned");
        let entry = st.manifest.dialogues.iter_mut().find(|s| s.id == d.id()).expect("dialogue in manifest");
        match outcome {
            Ok(DialogueOutcome { record, notes }) => {
                info!("{}: done after {} attempt(s)", d.id(), record.attempts.len());
                entry.status = Status::Done;
                entry.error = None;
                entry.notes = notes;
                st.records.insert(d.id().to_string(), record);
            }
            Err(e) => {
                warn!("{}: {e}", d.id());
                entry.status = Status::Failed;
                entry.error = Some(e.to_string());
                entry.notes.clear();
            }
        }
        st.persist(dir)
    });
    persisted.into_iter().collect::<Result<Vec<()>, _>>()?;
    let state = state.into_inner().expect("run state poisoned");

    let finals: Vec<Dialogue> = state.records.values().map(|r| r.final_dialogue.clone()).collect();
    let originals: Vec<Dialogue> = state.records.keys().map(|id| corpus.get(id).expect("record ids come from the corpus").clone()).collect();
    let augmented = Corpus::new(format!("{}-augmented", corpus.name), finals).expect("record ids are unique");
    let original = Corpus::new(corpus.name.clone(), originals).expect("corpus ids are unique");
    let outputs = &state.manifest.outputs;
    write_atomic(&dir.join(&outputs.augmented), &augmented.to_jsonl())?;
    let metrics = if augmented.is_empty() { None } else { evaluate_corpus(&augmented, &original).ok() };
    let csv = metrics.as_ref().map(MetricReport::to_csv).unwrap_or_else(|| format!("{}\n", crate::metrics::COLUMNS.join(",")));
    write_atomic(&dir.join(&outputs.metrics), csv.as_bytes())?;
    write_atomic(&dir.join(&outputs.report), report_text(&state.manifest, &state.records, metrics.as_ref()).as_bytes())?;

    Ok(RunSummary {
        processed: todo.len(),
        done: state.manifest.count(Status::Done),
        failed: state.manifest.count(Status::Failed),
        pending: state.manifest.count(Status::Pending),
        metrics,
    })
}
