//! Trains the masked-entity model on the toy graph until it memorizes the
//! train split, then ranks a few queries.
//!
//! `cargo run --release --example train_masked_entity`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::encoders::HashEncoder;
use kglab::eval::Directions;
use kglab::graph::{FilterIndex, Split};
use kglab::models::MaskedEntityModel;
use kglab::serialize::SerializeConfig;
use kglab::tasks;
use kglab::training::{self, MemoryLog, ModelKind, Trainer, TrainerConfig};
use kglab::{Direction, KnowledgeGraph};

fn main() -> kglab::Result<()> {
    let run = RunConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/config.toml")))?;
    let kg = KnowledgeGraph::load(&run.split_paths())?;
    let encoder = HashEncoder::new(64, 0)?;
    let ser = SerializeConfig::default();
    let cfg = TrainerConfig {
        learning_rate: 1.0,
        batch_size: 8,
        negatives_k: 0,
        ema_decay: 0.0,
        epochs: 200,
        patience: 200,
        ..TrainerConfig::default()
    };

    let mut log = MemoryLog::default();
    let state = Trainer::new(&kg, &encoder, &ser, cfg, ModelKind::MaskedEntity)?
        .with_plugin(&mut log)
        .fit(None)?;
    let losses: Vec<f64> = log
        .records
        .iter()
        .filter_map(|r| r.metrics.get("train_loss").copied())
        .collect();
    println!("epochs {}  first loss {:.3}  last loss {:.3}", state.epoch, losses[0], losses[losses.len() - 1]);

    let filter = FilterIndex::build(&kg);
    for split in [Split::Train, Split::Test] {
        let (m, _) = training::evaluate_params(ModelKind::MaskedEntity, &kg, state.eval_params(), &encoder, &ser, &filter, split, Directions::Both)?;
        println!("{split:?}: hits@1 {:.3}  mrr {:.3}", m.hits1, m.mrr);
    }

    let model = MaskedEntityModel::new(&kg, state.eval_params(), &encoder, &ser);
    let banana = kg.entity_by_raw("e02")?;
    let color = kg.relation_by_raw("r1")?;
    for r in tasks::kgc_predict(&model, banana, color, Direction::PredictTail, None, 3)? {
        println!("  (banana, has_color, {}) {:.3}", kg.entity(r.entity)?.name, r.score);
    }
    Ok(())
}
