//! Loads the toy graph, prints its statistics, a few verbalized triples and
//! sampled neighborhoods, then round-trips it through a snapshot.
//!
//! `cargo run --example load_graph`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::graph::{FilterIndex, Split};
use kglab::KnowledgeGraph;

fn main() -> kglab::Result<()> {
    let cfg = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&cfg.split_paths())?;
    println!("{}", serde_json::to_string(&kg.report())?);

    for t in kg.split(Split::Train).iter().take(4) {
        println!("  {}", kg.verbalize_triple(t)?);
    }

    let apple = kg.entity_by_raw("e01")?;
    for edge in kg.sample_neighbors(apple, 3, cfg.seed)? {
        println!("  neighbor of apple: {}", kg.verbalize_edge(&edge)?);
    }

    let filter = FilterIndex::build(&kg);
    let colors = filter.true_tails(apple, kg.relation_by_raw("r1")?);
    println!("known colors of apple: {:?}", colors.map(|s| s.len()));

    let snap = std::env::temp_dir().join("kglab-example-snapshot.json");
    kg.write_snapshot(&snap)?;
    let back = KnowledgeGraph::read_snapshot(&snap)?;
    println!("snapshot round trip equal: {}", back == kg);
    Ok(())
}
