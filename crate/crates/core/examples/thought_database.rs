//! Builds a dialogue-thought database with the offline fixture model, then
//! ranks it against a keyword set and assembles the few-shot thought prompt.

use kpt::dialogue::{Corpus, PostProcessor, SpeakerAliases};
use kpt::prompts::{PromptTemplateRegistry, Prompter};
use kpt::providers::mock::FixtureChat;
use kpt::providers::Decoding;
use kpt::thought::{build_progressive_prompt, build_thought_database, match_by_text, match_combinations, DEFAULT_TOKEN_BUDGET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/basic/corpus.jsonl");
    let corpus = Corpus::from_jsonl("basic", &std::fs::read(path)?, &SpeakerAliases::default())?;

    let chat = FixtureChat::new();
    let registry = PromptTemplateRegistry::default();
    let decoding = Decoding::default();
    let prompter = Prompter::new(&chat, &registry, &decoding);
    let (db, report) = build_thought_database(&corpus, &prompter, &PostProcessor::default(), 2)?;
    println!("{report}");

    let deepest = db.entries.iter().max_by_key(|e| e.combination.chain_depth()).expect("non-empty database");
    println!("\ndeepest chain ({} prior steps) from {}:\n{}", deepest.combination.chain_depth(), deepest.source_id, deepest.combination.serialize());

    let candidates = vec!["睡不".to_string(), "事情".to_string()];
    let ranked = match_combinations(&candidates, &db).unwrap_or_else(|_| match_by_text(&candidates, &db));
    for r in ranked.iter().take(3) {
        println!("match #{} score {:.2} from {}", r.index, r.score, db.entries[r.index].source_id);
    }

    let top: Vec<_> = ranked.iter().take(3).map(|r| &db.entries[r.index]).collect();
    let prompt = build_progressive_prompt(&top, DEFAULT_TOKEN_BUDGET, &registry)?;
    println!("\n{} combination(s), {} tokens:\n{}", prompt.combinations, prompt.token_count, prompt.text);
    Ok(())
}
