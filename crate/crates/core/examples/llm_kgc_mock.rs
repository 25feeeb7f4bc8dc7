//! In-context link prediction against an offline mock chat model: shows one
//! retrieved prompt, then scores the perfect and adversarial mocks.
//!
//! `cargo run --example llm_kgc_mock`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::graph::Split;
use kglab::llm::{self, LlmEvalConfig, MockMode, TripleRetriever};
use kglab::KnowledgeGraph;

fn main() -> kglab::Result<()> {
    let run = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&run.split_paths())?;
    let cfg = LlmEvalConfig {
        sample_size: 3,
        num_candidates: 8,
        num_demonstrations: 2,
        with_rationale: true,
        ..LlmEvalConfig::default()
    };

    let retriever = TripleRetriever::build(&kg)?;
    let prompt = llm::prompt_for(&kg, &retriever, &kg.split(Split::Test)[0], &cfg)?;
    println!("{}\n", prompt.rendered);

    for mode in [MockMode::Perfect, MockMode::Adversarial] {
        let client = llm::mock_for(&kg, &cfg, mode)?;
        let mut transcript = Vec::new();
        let (report, _) = llm::evaluate_llm_kgc(&kg, &client, &cfg, Some(&mut transcript))?;
        println!("{mode:?}: hits@1 {:.2} over {} queries", report.hits1, report.count);
        print!("{}", String::from_utf8_lossy(&transcript));
    }
    Ok(())
}
