//! Full offline run on the bundled fixture: thought database, augmentation
//! into a run directory, then the report.

use std::path::Path;

use kpt::dialogue::{Corpus, PostProcessor};
use kpt::pipeline::run::{run_augmentation, RunOptions, REPORT};
use kpt::pipeline::{mock_providers, Augmenter, PipelineConfig};
use kpt::prompts::Prompter;
use kpt::providers::mock::StaticKnowledgeGraph;
use kpt::thought::build_thought_database;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/basic");
    let mut config = PipelineConfig::from_json(&std::fs::read_to_string(fixture.join("config.json"))?)?;
    config.workers = 2;
    let corpus = Corpus::from_jsonl("basic", &std::fs::read(fixture.join("corpus.jsonl"))?, &config.aliases())?;
    let providers = mock_providers(StaticKnowledgeGraph::from_json(&std::fs::read_to_string(fixture.join("kg.json"))?)?);

    let registry = config.registry()?;
    let prompter = Prompter::new(providers.chat.as_ref(), &registry, &config.decoding);
    let (db, report) = build_thought_database(&corpus, &prompter, &PostProcessor::new(&config.aliases()), config.workers)?;
    println!("{report}");

    let out = std::env::temp_dir().join(format!("kpt-mock-{}", std::process::id()));
    let augmenter = Augmenter::new(config, providers, db)?;
    let summary = run_augmentation(&augmenter, &corpus, &out, &RunOptions::default())?;
    println!("{} done, {} failed -> {}\n", summary.done, summary.failed, out.display());
    print!("{}", std::fs::read_to_string(out.join(REPORT))?);
    std::fs::remove_dir_all(&out)?;
    Ok(())
}
