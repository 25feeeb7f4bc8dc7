//! Reuses a trained masked-entity model for question answering and trains
//! small heads for next-item recommendation and cloze probing.
//!
//! `cargo run --release --example downstream_tasks`

use std::path::Path;

use kglab::app::RunConfig;
use kglab::encoders::HashEncoder;
use kglab::models::MaskedEntityModel;
use kglab::serialize::SerializeConfig;
use kglab::tasks::{self, ProbeModel};
use kglab::training::{ModelKind, Trainer, TrainerConfig};
use kglab::KnowledgeGraph;

fn main() -> kglab::Result<()> {
    let data = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy"));
    let run = RunConfig::load(&data.join("config.toml"))?;
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
    let state = Trainer::new(&kg, &encoder, &ser, cfg.clone(), ModelKind::MaskedEntity)?.fit(None)?;
    let model = MaskedEntityModel::new(&kg, state.eval_params(), &encoder, &ser);

    println!("question answering");
    let qa = tasks::read_qa(&data.join("qa.tsv"), &kg)?;
    for item in &qa {
        let best = tasks::qa_answer(&model, &item.question, 1)?[0];
        println!("  {:<32} -> {:<8} (gold {})", item.question, kg.entity(best.entity)?.name, kg.entity(item.gold)?.name);
    }
    let m = tasks::qa_eval(&model, &qa)?;
    println!("  hits@1 {:.2}  mrr {:.2}", m.hits1, m.mrr);

    println!("next-item recommendation");
    let histories = tasks::read_interactions(&data.join("interactions.tsv"), &kg)?;
    let rec_params = tasks::train_recommender(&kg, &encoder, ser.max_len, &histories, &cfg)?;
    let recommender = MaskedEntityModel::new(&kg, &rec_params, &encoder, &ser);
    for h in &histories {
        let prefix = tasks::InteractionHistory {
            user: h.user.clone(),
            items: h.items[..h.items.len() - 1].to_vec(),
        };
        let top = tasks::recommend_next(&recommender, &prefix, 2)?;
        let names: Vec<&str> = top.iter().map(|r| kg.entities()[r.entity.0].name.as_str()).collect();
        println!("  {} -> {:?} (held out {})", h.user, names, kg.entity(h.items[h.items.len() - 1])?.name);
    }

    println!("cloze probing");
    let probes = tasks::read_probes(&data.join("probes.tsv"), &kg, &ser)?;
    let vocabulary: Vec<String> = kg.entities().iter().map(|e| e.name.clone()).collect();
    let probe_cfg = TrainerConfig { epochs: 50, ..cfg };
    let mut probe = ProbeModel {
        token_table: tasks::train_token_table(&encoder, &vocabulary, &probes, &probe_cfg)?,
        entity_table: state.eval_params().entity_table.clone(),
        vocabulary,
        lambda: 0.5,
    };
    let report = tasks::probe_eval(&probe, &encoder, &probes)?;
    println!("  lambda 0.5: base hits@1 {:.2}  augmented hits@1 {:.2}", report.base.hits1, report.augmented.hits1);
    probe.lambda = 0.0;
    let off = tasks::probe_eval(&probe, &encoder, &probes)?;
    println!("  lambda 0.0: augmented equals base: {}", off.base == off.augmented);
    Ok(())
}
