//! Prints the token sequences each model family sees for one triple.
//!
//! `cargo run --example serialize_inputs`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::graph::Split;
use kglab::serialize::{self, SerializeConfig, TokenSequence};
use kglab::{Direction, KnowledgeGraph};

fn show(label: &str, seq: &TokenSequence) {
    println!("{label:>12}: {}", seq.rendered_tokens().join(" "));
}

fn main() -> kglab::Result<()> {
    let cfg = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&cfg.split_paths())?;
    let t = kg.split(Split::Train)[0];

    let plain = SerializeConfig {
        description_included: false,
        ..SerializeConfig::default()
    };
    show("hr pair", &serialize::encode_hr_pair(&kg, t.head, t.relation, &plain)?);
    show("tail", &serialize::encode_tail(&kg, t.tail, &plain)?);
    show("masked", &serialize::encode_masked_query(&kg, t.head, t.relation, Direction::PredictTail, &plain)?);
    show("masked rev", &serialize::encode_masked_query(&kg, t.tail, t.relation, Direction::PredictHead, &plain)?);
    show("joint", &serialize::encode_joint_triple(&kg, &t, &plain)?);

    let rich = SerializeConfig {
        neighbor_k: 2,
        max_len: 24,
        ..SerializeConfig::default()
    };
    show("with context", &serialize::encode_hr_pair(&kg, t.head, t.relation, &rich)?);
    Ok(())
}
