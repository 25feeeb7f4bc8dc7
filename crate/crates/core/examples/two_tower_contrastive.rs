//! Two-tower training with InfoNCE over in-batch and mined hard negatives.
//!
//! `cargo run --release --example two_tower_contrastive`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::encoders::HashEncoder;
use kglab::eval::Directions;
use kglab::graph::{FilterIndex, Split};
use kglab::serialize::SerializeConfig;
use kglab::training::{self, MemoryLog, ModelKind, Trainer, TrainerConfig};
use kglab::KnowledgeGraph;

fn main() -> kglab::Result<()> {
    let run = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&run.split_paths())?;
    let encoder = HashEncoder::new(64, 0)?;
    let ser = SerializeConfig::default();
    let cfg = TrainerConfig {
        learning_rate: 0.5,
        batch_size: 8,
        negatives_k: 4,
        epochs: 100,
        patience: 100,
        ema_decay: 0.0,
        ..TrainerConfig::default()
    };

    let mut log = MemoryLog::default();
    let state = Trainer::new(&kg, &encoder, &ser, cfg, ModelKind::TwoTower)?
        .with_plugin(&mut log)
        .fit(None)?;
    for r in log.records.iter().filter(|r| r.metrics.contains_key("train_loss")).step_by(20) {
        println!("epoch {:>3}  loss {:.4}", r.epoch, r.metrics["train_loss"]);
    }

    let filter = FilterIndex::build(&kg);
    for split in [Split::Train, Split::Test] {
        let (m, _) = training::evaluate_params(ModelKind::TwoTower, &kg, state.eval_params(), &encoder, &ser, &filter, split, Directions::Both)?;
        println!("{split:?}: hits@1 {:.3}  hits@10 {:.3}  mrr {:.3}", m.hits1, m.hits10, m.mrr);
    }
    Ok(())
}
