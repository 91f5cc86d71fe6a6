//! Knowledge-graph k-shot block and single-line knowledge generation.

use kpt::dialogue::PostProcessor;
use kpt::knowledge::{build_kshot_block, generate_knowledge, knowledge_prompt, DEFAULT_SHOT_CAP};
use kpt::providers::mock::{FixtureChat, StaticKnowledgeGraph};
use kpt::providers::Decoding;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kg = StaticKnowledgeGraph::from_json(&std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/basic/kg.json"))?)?;
    let keywords: Vec<String> = ["睡不", "考试", "担心", "未登录词"].iter().map(|s| s.to_string()).collect();
    let block = build_kshot_block(&keywords, &kg, DEFAULT_SHOT_CAP)?;
    println!("k = {} (keywords without an entry are skipped)\n", block.k());
    println!("prompt for 父母:\n{}\n", knowledge_prompt(&block, "父母"));

    let chat = FixtureChat::new();
    let knowledge = generate_knowledge(&block, "父母", &chat, &Decoding::default(), &PostProcessor::default())?;
    println!("generated: {}", knowledge.text);
    println!("sources:   {:?}", knowledge.source_keywords);
    Ok(())
}
