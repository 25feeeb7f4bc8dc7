//! Generation-style link prediction: a bigram model fitted on the train
//! split decodes entity names under a prefix-trie constraint. With a beam as
//! wide as the entity set the decoder agrees with exhaustive scoring.
//!
//! `cargo run --example constrained_decoding`

use std::path::Path;

use kglab::app::{fit_generation_lm, RunConfig};
use kglab::eval::LinkScorer;
use kglab::graph::Split;
use kglab::models::GenerationModel;
use kglab::scoring::{decode_constrained, EntityTrie};
use kglab::serialize::SerializeConfig;
use kglab::{Direction, KnowledgeGraph};

fn main() -> kglab::Result<()> {
    let run = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&run.split_paths())?;
    let ser = SerializeConfig::default();
    let lm = fit_generation_lm(&kg, &ser)?;
    let trie = EntityTrie::build(&kg, &ser)?;
    let model = GenerationModel::new(&kg, &lm, &ser)?;

    for t in kg.split(Split::Test) {
        let ctx = model.context(t.head, t.relation, Direction::PredictTail)?;
        let beam3 = decode_constrained(&lm, &ctx, &trie, 3)?;
        let full = decode_constrained(&lm, &ctx, &trie, kg.num_entities())?;
        let exhaustive = model.score_candidates(t.head, t.relation, Direction::PredictTail)?;
        let best = (0..exhaustive.len())
            .max_by(|&a, &b| exhaustive[a].total_cmp(&exhaustive[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let names = |v: &[(kglab::EntityId, f64)]| -> kglab::Result<Vec<String>> {
            v.iter().map(|(id, _)| Ok(kg.entity(*id)?.name.clone())).collect()
        };
        println!("{}", kg.verbalize_triple(t)?);
        println!("  beam 3      : {:?}", names(&beam3)?);
        println!("  full beam   : {}  exhaustive : {}", kg.entity(full[0].0)?.name, kg.entity(kglab::EntityId(best))?.name);
    }
    Ok(())
}
