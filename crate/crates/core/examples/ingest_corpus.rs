//! Normalizes a small corpus with custom speaker labels and cuts it into
//! training windows.

use kpt::dialogue::{extract_windows, Corpus, SpeakerAliases};

const RAW: &str = r#"{"id":"s1","language":"en","turns":[{"speaker":"Coach","text":"How was your week?"},{"speaker":"client","text":"I barely slept."},{"speaker":"coach","text":"What kept you up?"},{"speaker":"client","text":"Deadlines, mostly."},{"speaker":"coach","text":"That sounds heavy."},{"speaker":"client","text":"It is."}]}
{"id":"s2","language":"zh","turns":[{"speaker":"来访者","text":"我最近总是很焦虑。"},{"speaker":"咨询师","text":"能说说是什么让你焦虑吗？"}]}
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let aliases = SpeakerAliases::from_json_overrides(r#"{"coach": "therapist"}"#)?;
    let corpus = Corpus::from_jsonl("demo", RAW.as_bytes(), &aliases)?;
    for d in corpus.dialogues() {
        println!("== {} ({} turns)\n{}\n", d.id(), d.len(), d.transcript());
    }

    // windows of 2..=4 turns never open on a therapist turn
    for w in extract_windows(&corpus.dialogues()[0], 2, 4, Some(2))? {
        println!("-- {}\n{}", w.id(), w.transcript());
    }

    print!("\ncanonical JSONL:\n{}", String::from_utf8(corpus.to_jsonl())?);
    Ok(())
}
