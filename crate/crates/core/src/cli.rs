//! Command-line front end. Exit codes: 0 success, 1 partial failure, 2
//! configuration or input error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::dialogue::{extract_windows, Corpus, PostProcessor, SpeakerAliases};
use crate::metrics::evaluate_corpus;
use crate::pipeline::run::{run_augmentation, write_atomic, RunOptions, AUGMENTED, MANIFEST, METRICS, RECORDS, REPORT};
use crate::pipeline::{mock_providers, providers_from_config, Augmenter, PipelineConfig};
use crate::prompts::Prompter;
use crate::providers::mock::StaticKnowledgeGraph;
use crate::providers::Providers;
use crate::thought::{build_thought_database, ThoughtDatabase};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Thought database file written by `mock-run`.
pub const THOUGHTS: &str = "thoughts.jsonl";
/// Files compared byte for byte against a fixture's `golden/` directory.
pub const GOLDEN_FILES: [&str; 6] = [THOUGHTS, MANIFEST, AUGMENTED, RECORDS, METRICS, REPORT];

#[derive(Debug, Parser)]
#[command(name = "kpt", version, about = "Counseling dialogue augmentation with thought chains and knowledge prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dialogue corpus into canonical JSONL, optionally cutting windows.
    Ingest(IngestArgs),
    /// Build the dialogue-thought database from a corpus.
    BuildThoughtDb(BuildArgs),
    /// Augment a corpus into a resumable run directory.
    Augment(AugmentArgs),
    /// Score a generated corpus against the original.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline offline on a fixture and compare with its golden files.
    MockRun(MockRunArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object of extra role labels, e.g. {"coach": "therapist"}.
    #[arg(long)]
    pub aliases: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Cut every dialogue into windows of at least this many turns.
    #[arg(long, requires = "window_max")]
    pub window_min: Option<usize>,
    #[arg(long, requires = "window_min")]
    pub window_max: Option<usize>,
    #[arg(long, requires = "window_min")]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Seeds clustering and keyword injection.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub upper: Option<f64>,
    #[arg(long)]
    pub lower: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<usize>,
    #[arg(long)]
    pub disable_thought: bool,
    #[arg(long)]
    pub disable_knowledge: bool,
    #[arg(long)]
    pub disable_punishment: bool,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.punishment.seed = seed;
        }
        if let Some(v) = self.upper {
            config.punishment.upper_threshold = v;
        }
        if let Some(v) = self.lower {
            config.punishment.lower_threshold = v;
        }
        if let Some(v) = self.max_retries {
            config.punishment.max_retries = v;
        }
        config.ablation.disable_thought |= self.disable_thought;
        config.ablation.disable_knowledge |= self.disable_knowledge;
        config.ablation.disable_punishment |= self.disable_punishment;
        if let Some(w) = self.workers {
            config.workers = w;
        }
    }
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Thought database; may be omitted with --disable-thought.
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Stop after this many dialogues; a later run resumes the rest.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub original: PathBuf,
    /// Write the CSV report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockRunArgs {
    /// Directory with corpus.jsonl, kg.json, config.json and golden/.
    #[arg(long)]
    pub fixture: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Overwrite the golden files with this run's output.
    #[arg(long)]
    pub bless: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn config_err(message: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.to_string() }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn read_string(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure { code: EXIT_PARTIAL, message: format!("{}: {e}", parent.display()) })?;
    }
    fs::write(path, bytes).map_err(|e| Failure { code: EXIT_PARTIAL, message: format!("{}: {e}", path.display()) })
}

fn corpus_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
}

fn load_corpus(path: &Path, aliases: &SpeakerAliases) -> Result<Corpus, Failure> {
    Corpus::from_jsonl(corpus_name(path), &read(path)?, aliases).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig, Failure> {
    let text = read_string(path)?;
    let mut config = PipelineConfig::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    overrides.apply(&mut config);
    config.validate().map_err(|e| config_err(format!("{} (after overrides): {e}", path.display())))?;
    Ok(config)
}

fn ingest(args: &IngestArgs) -> Result<i32, Failure> {
    let aliases = match &args.aliases {
        Some(p) => SpeakerAliases::from_json_overrides(&read_string(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => SpeakerAliases::default(),
    };
    let mut corpus = load_corpus(&args.input, &aliases)?;
    if let Some(name) = &args.name {
        corpus.name = name.clone();
    }
    if let (Some(min), Some(max)) = (args.window_min, args.window_max) {
        let mut windows = Vec::new();
        for d in corpus.dialogues() {
            windows.extend(extract_windows(d, min, max, args.stride).map_err(config_err)?);
        }
        corpus = Corpus::new(corpus.name.clone(), windows).map_err(config_err)?;
    }
    write(&args.out, &corpus.to_jsonl())?;
    info!("wrote {} dialogue(s) to {}", corpus.len(), args.out.display());
    Ok(EXIT_OK)
}

fn build_db(corpus: &Corpus, config: &PipelineConfig, providers: &Providers, workers: usize) -> Result<(ThoughtDatabase, i32), Failure> {
    let registry = config.registry().map_err(config_err)?;
    let prompter = Prompter::new(providers.chat.as_ref(), &registry, &config.decoding);
    let post = PostProcessor::new(&config.aliases());
    match build_thought_database(corpus, &prompter, &post, workers) {
        Ok((db, report)) => {
            info!("thought database: {report}");
            let code = if report.skipped.is_empty() { EXIT_OK } else { EXIT_PARTIAL };
            Ok((db, code))
        }
        Err(e) => Err(Failure { code: EXIT_PARTIAL, message: e.to_string() }),
    }
}

fn build_thought_db(args: &BuildArgs) -> Result<i32, Failure> {
    let overrides = Overrides { workers: args.workers, ..Default::default() };
    let config = load_config(&args.config, &overrides)?;
    let corpus = load_corpus(&args.input, &config.aliases())?;
    let providers = providers_from_config(&config.providers).map_err(config_err)?;
    let (db, code) = build_db(&corpus, &config, &providers, config.workers)?;
    write(&args.out, &db.to_jsonl())?;
    Ok(code)
}

fn run_dir(augmenter: &Augmenter, corpus: &Corpus, out: &Path, options: &RunOptions) -> Result<i32, Failure> {
    let summary = run_augmentation(augmenter, corpus, out, options).map_err(|e| config_err(e.to_string()))?;
    info!(
        "{} processed: {} done, {} failed, {} pending",
        summary.processed, summary.done, summary.failed, summary.pending
    );
    if let Some(m) = &summary.metrics {
        eprint!("{}", m.to_table());
    }
    Ok(if summary.failed == 0 && summary.pending == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

fn augment(args: &AugmentArgs) -> Result<i32, Failure> {
    let config = load_config(&args.config, &args.overrides)?;
    let corpus = load_corpus(&args.input, &config.aliases())?;
    let database = match &args.db {
        Some(p) => ThoughtDatabase::from_jsonl(&read_string(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None if config.ablation.disable_thought => ThoughtDatabase::default(),
        None => return Err(config_err("--db is required unless the thought stage is disabled")),
    };
    let providers = providers_from_config(&config.providers).map_err(config_err)?;
    let augmenter = Augmenter::new(config, providers, database).map_err(config_err)?;
    run_dir(&augmenter, &corpus, &args.out, &RunOptions { stop_after: args.stop_after })
}

fn evaluate(args: &EvaluateArgs) -> Result<i32, Failure> {
    let aliases = SpeakerAliases::default();
    let generated = load_corpus(&args.generated, &aliases)?;
    let original = load_corpus(&args.original, &aliases)?;
    let report = evaluate_corpus(&generated, &original).map_err(config_err)?;
    eprint!("{}", report.to_table());
    if let Some(out) = &args.out {
        write(out, report.to_csv().as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// Runs the offline pipeline for a fixture directory into `out`, starting
/// from a clean set of output files.
pub fn mock_run_into(fixture: &Path, out: &Path, overrides: &Overrides) -> Result<i32, Failure> {
    let config = load_config(&fixture.join("config.json"), overrides)?;
    let corpus = load_corpus(&fixture.join("corpus.jsonl"), &config.aliases())?;
    let kg = StaticKnowledgeGraph::from_json(&read_string(&fixture.join("kg.json"))?).map_err(config_err)?;
    let providers = mock_providers(kg);
    fs::create_dir_all(out).map_err(|e| config_err(format!("{}: {e}", out.display())))?;
    for name in GOLDEN_FILES {
        let path = out.join(name);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        }
    }
    let (database, db_code) = build_db(&corpus, &config, &providers, config.workers)?;
    write_atomic(&out.join(THOUGHTS), &database.to_jsonl()).map_err(config_err)?;
    let augmenter = Augmenter::new(config, providers, database).map_err(config_err)?;
    let code = run_dir(&augmenter, &corpus, out, &RunOptions::default())?;
    Ok(code.max(db_code))
}

/// Names of the golden files that differ from `out` (missing counts as different).
pub fn golden_differences(golden: &Path, out: &Path) -> Vec<String> {
    GOLDEN_FILES
        .iter()
        .filter(|name| {
            let expected = fs::read(golden.join(name));
            let actual = fs::read(out.join(name));
            !matches!((expected, actual), (Ok(a), Ok(b)) if a == b)
        })
        .map(|n| n.to_string())
        .collect()
}

fn mock_run(args: &MockRunArgs) -> Result<i32, Failure> {
    let code = mock_run_into(&args.fixture, &args.out, &args.overrides)?;
    let golden = args.fixture.join("golden");
    if args.bless {
        fs::create_dir_all(&golden).map_err(|e| config_err(format!("{}: {e}", golden.display())))?;
        for name in GOLDEN_FILES {
            fs::copy(args.out.join(name), golden.join(name)).map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        info!("blessed {} golden file(s) in {}", GOLDEN_FILES.len(), golden.display());
        return Ok(code);
    }
    let diff = golden_differences(&golden, &args.out);
    if diff.is_empty() {
        info!("output matches {}", golden.display());
        Ok(code)
    } else {
        for name in &diff {
            warn!("{name} differs from the golden copy");
        }
        Err(Failure { code: EXIT_PARTIAL, message: format!("golden mismatch: {}", diff.join(", ")) })
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::BuildThoughtDb(a) => build_thought_db(a),
        Command::Augment(a) => augment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::MockRun(a) => mock_run(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
