//! On-disk training checkpoints.
//!
//! A checkpoint directory holds:
//!
//! * `header.json`: scalar state and the configs the run used;
//! * `entities.emb`: the evaluation entity table keyed by raw entity id;
//! * `params.emb`: every raw parameter row under a prefixed key;
//! * `ema.emb`: the same for the EMA shadow, when averaging is on.
//!
//! All files are written deterministically, so two identical runs produce
//! byte-identical checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingStore;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::linalg::Matrix;
use crate::scoring::ModelParameters;
use crate::serialize::SerializeConfig;
use crate::training::{ModelKind, TrainerConfig, TrainingState};

pub const HEADER_FILE: &str = "header.json";
pub const ENTITIES_FILE: &str = "entities.emb";
pub const PARAMS_FILE: &str = "params.emb";
pub const EMA_FILE: &str = "ema.emb";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub classifier_bias: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub kind: ModelKind,
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub epoch: usize,
    pub step: usize,
    pub valid_history: Vec<f64>,
    pub best_valid: Option<f64>,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
    pub params: Scalars,
    pub ema: Option<Scalars>,
    pub has_context_projection: bool,
    pub trainer: TrainerConfig,
    pub serialize: SerializeConfig,
}

fn scalars(p: &ModelParameters) -> Scalars {
    Scalars {
        classifier_bias: p.classifier_bias,
        temperature: p.temperature,
    }
}

fn params_to_store(kg: &KnowledgeGraph, p: &ModelParameters) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(p.dim());
    for e in kg.entities() {
        store.insert(format!("entity/{}", e.raw_id), p.entity_table.row(e.id.0).to_vec())?;
    }
    for r in kg.relations() {
        store.insert(format!("relation/{}", r.raw_id), p.relation_table.row(r.id.0).to_vec())?;
    }
    let mut matrix = |name: &str, m: &Matrix| -> Result<()> {
        for (i, row) in m.iter_rows().enumerate() {
            store.insert(format!("{name}/{i:06}"), row.to_vec())?;
        }
        Ok(())
    };
    matrix("query_projection", &p.query_projection)?;
    matrix("tail_projection", &p.tail_projection)?;
    if let Some(c) = &p.context_projection {
        matrix("context_projection", c)?;
    }
    store.insert("classifier/weights", p.classifier_weights.clone())?;
    Ok(store)
}

fn params_from_store(
    kg: &KnowledgeGraph,
    store: &EmbeddingStore,
    s: Scalars,
    has_context_projection: bool,
) -> Result<ModelParameters> {
    let d = store.dim();
    let rows = |keys: Vec<String>| -> Result<Matrix> {
        let rows = keys
            .iter()
            .map(|k| store.get(k).map(|v| v.into_values()))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, d));
        }
        Matrix::from_rows(rows)
    };
    let square = |name: &str| rows((0..d).map(|i| format!("{name}/{i:06}")).collect());
    let params = ModelParameters {
        entity_table: rows(kg.entities().iter().map(|e| format!("entity/{}", e.raw_id)).collect())?,
        relation_table: rows(kg.relations().iter().map(|r| format!("relation/{}", r.raw_id)).collect())?,
        query_projection: square("query_projection")?,
        tail_projection: square("tail_projection")?,
        context_projection: if has_context_projection {
            Some(square("context_projection")?)
        } else {
            None
        },
        classifier_weights: store.get("classifier/weights")?.into_values(),
        classifier_bias: s.classifier_bias,
        temperature: s.temperature,
    };
    params.validate()?;
    Ok(params)
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    kg: &KnowledgeGraph,
    state: &TrainingState,
    trainer: &TrainerConfig,
    serialize: &SerializeConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        kind: state.kind,
        dim: state.params.dim(),
        num_entities: kg.num_entities(),
        num_relations: kg.num_relations(),
        epoch: state.epoch,
        step: state.step,
        valid_history: state.valid_history.clone(),
        best_valid: state.best_valid,
        epochs_since_improvement: state.epochs_since_improvement,
        stopped_early: state.stopped_early,
        params: scalars(&state.params),
        ema: state.ema.as_ref().map(scalars),
        has_context_projection: state.params.context_projection.is_some(),
        trainer: trainer.clone(),
        serialize: serialize.clone(),
    };
    let path = dir.join(HEADER_FILE);
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut entities = EmbeddingStore::new(state.params.dim());
    let eval = state.eval_params();
    for e in kg.entities() {
        entities.insert(e.raw_id.clone(), eval.entity_table.row(e.id.0).to_vec())?;
    }
    entities.save(&dir.join(ENTITIES_FILE))?;
    params_to_store(kg, &state.params)?.save(&dir.join(PARAMS_FILE))?;
    let ema_path = dir.join(EMA_FILE);
    match &state.ema {
        Some(ema) => params_to_store(kg, ema)?.save(&ema_path)?,
        None if ema_path.exists() => fs::remove_file(&ema_path).map_err(|e| Error::io(&ema_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Malformed {
            path,
            line: 1,
            message: format!("unsupported checkpoint format {}", header.format),
        });
    }
    Ok(header)
}

/// Restores the state saved by [`save_checkpoint`] for the same graph.
pub fn load_checkpoint(dir: &Path, kg: &KnowledgeGraph) -> Result<(TrainingState, CheckpointHeader)> {
    let header = read_header(dir)?;
    if header.num_entities != kg.num_entities() || header.num_relations != kg.num_relations() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was written for {} entities / {} relations, graph has {} / {}",
            header.num_entities,
            header.num_relations,
            kg.num_entities(),
            kg.num_relations()
        )));
    }
    let load = |file: &str, s: Scalars| -> Result<ModelParameters> {
        let store = EmbeddingStore::load(&dir.join(file))?;
        if store.dim() != header.dim {
            return Err(Error::DimensionMismatch {
                expected: header.dim,
                actual: store.dim(),
            });
        }
        params_from_store(kg, &store, s, header.has_context_projection)
    };
    let params = load(PARAMS_FILE, header.params)?;
    let ema = header.ema.map(|s| load(EMA_FILE, s)).transpose()?;
    let state = TrainingState {
        kind: header.kind,
        params,
        ema,
        epoch: header.epoch,
        step: header.step,
        valid_history: header.valid_history.clone(),
        best_valid: header.best_valid,
        epochs_since_improvement: header.epochs_since_improvement,
        stopped_early: header.stopped_early,
    };
    Ok((state, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TextRecord;

    fn kg() -> KnowledgeGraph {
        let ents = vec![
            TextRecord::new("a", "alpha", ""),
            TextRecord::new("b", "beta", ""),
            TextRecord::new("c", "gamma", ""),
        ];
        let rels = vec![TextRecord::new("r", "rel", "")];
        let train = vec![("a".to_string(), "r".to_string(), "b".to_string())];
        KnowledgeGraph::from_records(ents, rels, &train, &[], &[]).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless_and_byte_stable() {
        let kg = kg();
        let mut params = ModelParameters::init(3, 1, 4, 0.3, 0.05, 9).unwrap();
        params.context_projection = Some(Matrix::identity(4));
        params.classifier_bias = 0.123456789;
        let mut ema = params.clone();
        ema.entity_table.set(1, 2, 0.1 + 0.2);
        let state = TrainingState {
            kind: ModelKind::MaskedEntity,
            params,
            ema: Some(ema),
            epoch: 3,
            step: 17,
            valid_history: vec![0.25, 0.5],
            best_valid: Some(0.5),
            epochs_since_improvement: 0,
            stopped_early: false,
        };
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let (tc, sc) = (TrainerConfig::default(), SerializeConfig::default());
        save_checkpoint(&a, &kg, &state, &tc, &sc).unwrap();
        let (back, header) = load_checkpoint(&a, &kg).unwrap();
        assert_eq!(back, state);
        assert_eq!(header.trainer, tc);
        save_checkpoint(&b, &kg, &back, &tc, &sc).unwrap();
        for f in [HEADER_FILE, ENTITIES_FILE, PARAMS_FILE, EMA_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        // the entity file carries the EMA table
        let ents = EmbeddingStore::load(&a.join(ENTITIES_FILE)).unwrap();
        assert_eq!(ents.get("b").unwrap().values()[2], 0.1 + 0.2);
    }

    #[test]
    fn rejects_other_graph() {
        let kg3 = kg();
        let state = TrainingState {
            kind: ModelKind::TwoTower,
            params: ModelParameters::init(3, 1, 2, 0.3, 0.05, 0).unwrap(),
            ema: None,
            epoch: 0,
            step: 0,
            valid_history: vec![],
            best_valid: None,
            epochs_since_improvement: 0,
            stopped_early: false,
        };
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(tmp.path(), &kg3, &state, &TrainerConfig::default(), &SerializeConfig::default()).unwrap();
        let small = KnowledgeGraph::from_records(
            vec![TextRecord::new("a", "alpha", "")],
            vec![TextRecord::new("r", "rel", "")],
            &[],
            &[],
            &[],
        )
        .unwrap();
        assert!(load_checkpoint(tmp.path(), &small).is_err());
    }
}
