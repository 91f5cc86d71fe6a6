//! Scores the fixture's golden augmented corpus against its source.

use kpt::dialogue::{Corpus, SpeakerAliases};
use kpt::metrics::{bleu_n, distinct_n, evaluate_corpus};
use kpt::text::tokenize;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/basic");
    let aliases = SpeakerAliases::default();
    let original = Corpus::from_jsonl("basic", &std::fs::read(format!("{dir}/corpus.jsonl"))?, &aliases)?;
    let generated = Corpus::from_jsonl("augmented", &std::fs::read(format!("{dir}/golden/augmented.jsonl"))?, &aliases)?;

    let report = evaluate_corpus(&generated, &original)?;
    println!("{} dialogues, {} generated turns\n{report}", report.dialogues, report.generated_turns);

    // the same scores on raw token lists
    let cand = vec![tokenize("我 最近 睡得 不好").into_iter().map(String::from).collect::<Vec<_>>()];
    let refs = vec![tokenize("我 最近 总是 睡得 不好").into_iter().map(String::from).collect::<Vec<_>>()];
    println!("BLEU-2 {:.2}, Distinct-1 {:.2}", bleu_n(&cand, &refs, 2)?, distinct_n(&cand, 1)?);
    Ok(())
}
