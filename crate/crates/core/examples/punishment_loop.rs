//! Similarity-gated regeneration with scripted scores: one near-copy, one
//! drift, then an accepted rewrite. Injected keywords appear from the second
//! attempt on.

use kpt::augment::{punish_and_retry, PTKeywordDatabase, PunishmentConfig};
use kpt::dialogue::{Dialogue, Language, Speaker};
use kpt::providers::mock::SequenceSimilarity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let source = Dialogue::new(
        "demo",
        Language::En,
        [(Speaker::Patient, "I can't focus at work."), (Speaker::Therapist, "When did that start?")],
    )?;
    let config = PunishmentConfig::default();
    let keywords = PTKeywordDatabase::new(vec!["workload".into(), "sleep".into(), "self-doubt".into()]);
    let scores = SequenceSimilarity::new([0.97, 0.12, 0.64]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut round = 0;
    let record = punish_and_retry(
        &source,
        |injected, fallback| {
            round += 1;
            let extra = injected.map(|k| format!(" It's about {k}.")).unwrap_or_default();
            let text = if fallback { "Plain rewrite.".to_string() } else { format!("Candidate {round}.{extra}") };
            Ok(Dialogue::new("demo", Language::En, [(Speaker::Patient, text.as_str()), (Speaker::Therapist, "Tell me more.")]).expect("two turns"))
        },
        &scores,
        &config,
        keywords.as_ref(),
        &mut rng,
    )?;

    println!("window [{}, {}], {} retries", config.lower_threshold, config.upper_threshold, config.max_retries);
    for (i, a) in record.attempts.iter().enumerate() {
        let s = a.similarity.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into());
        println!("attempt {}: {:?} at {s}, injected {:?}", i + 1, a.verdict, a.injected_keyword);
    }
    println!("\nfinal:\n{}", record.final_dialogue.transcript());
    Ok(())
}
