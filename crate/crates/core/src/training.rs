//! Losses with analytic gradients, negative mining, parameter averaging,
//! early stopping, and the epoch loop that ties them together.
//!
//! All updates are plain SGD on the masked-entity table (plus optional
//! context projection), the two-tower projections, or the joint classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::eval::{self, Directions, MetricsReport, RankResult};
use crate::graph::{EntityId, FilterIndex, KnowledgeGraph, RelationId, Split};
use crate::linalg::{self, Matrix};
use crate::models::{JointModel, MaskedEntityModel, TailBank, TwoTowerModel};
use crate::scoring::{self, ModelParameters};
use crate::serialize::{self, Direction, SerializeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MaskedEntity,
    TwoTower,
    Joint,
    Generation,
    Llm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::MaskedEntity => "masked_entity",
            ModelKind::TwoTower => "two_tower",
            ModelKind::Joint => "joint",
            ModelKind::Generation => "generation",
            ModelKind::Llm => "llm",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, ModelKind::MaskedEntity | ModelKind::TwoTower | ModelKind::Joint)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "masked_entity" => Ok(ModelKind::MaskedEntity),
            "two_tower" => Ok(ModelKind::TwoTower),
            "joint" => Ok(ModelKind::Joint),
            "generation" => Ok(ModelKind::Generation),
            "llm" => Ok(ModelKind::Llm),
            _ => Err(Error::InvalidArgument(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Zero disables the shadow copy.
    pub ema_decay: f64,
    pub patience: usize,
    pub min_delta: f64,
    /// Hard negatives per query; zero means the full entity softmax.
    pub negatives_k: usize,
    pub temperature: f64,
    /// Caps a run at two epochs of five batches.
    pub fast_run: bool,
    pub seed: u64,
    pub dim: usize,
    pub init_scale: f64,
    pub context_projection: bool,
    pub directions: Directions,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            label_smoothing: 0.1,
            ema_decay: 0.999,
            patience: 3,
            min_delta: 1e-4,
            negatives_k: 32,
            temperature: 0.05,
            fast_run: false,
            seed: 0,
            dim: 64,
            init_scale: 0.1,
            context_projection: false,
            directions: Directions::Both,
        }
    }
}

pub const FAST_RUN_EPOCHS: usize = 2;
pub const FAST_RUN_BATCHES: usize = 5;

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.min_delta < 0.0 {
            return bad(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        Ok(())
    }

    pub fn effective_epochs(&self) -> usize {
        if self.fast_run {
            self.epochs.min(FAST_RUN_EPOCHS)
        } else {
            self.epochs
        }
    }

    pub fn max_batches(&self) -> Option<usize> {
        self.fast_run.then_some(FAST_RUN_BATCHES)
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `1 - ε + ε/K` on the target, `ε/K` elsewhere.
pub fn smoothed_targets(k: usize, target: usize, epsilon: f64) -> Result<Vec<f64>> {
    if k < 2 || target >= k {
        return Err(Error::InvalidArgument(format!("target {target} invalid for {k} classes")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing must be in [0, 1), got {epsilon}")));
    }
    let mut q = vec![epsilon / k as f64; k];
    q[target] += 1.0 - epsilon;
    Ok(q)
}

/// Cross-entropy of `softmax(logits)` against smoothed targets.
pub fn cross_entropy_smoothed(logits: &[f64], target: usize, epsilon: f64) -> Result<f64> {
    Ok(cross_entropy_smoothed_grad(logits, target, epsilon)?.0)
}

/// Loss and its gradient with respect to the logits, `softmax - q`.
pub fn cross_entropy_smoothed_grad(logits: &[f64], target: usize, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if let Some(l) = logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logit {l}")));
    }
    let q = smoothed_targets(logits.len(), target, epsilon)?;
    let logp = scoring::log_softmax(logits);
    let loss = -q.iter().zip(&logp).map(|(qi, li)| qi * li).sum::<f64>();
    let grad = logp.iter().zip(&q).map(|(l, qi)| l.exp() - qi).collect();
    Ok((loss, grad))
}

/// Binary cross-entropy of `sigmoid(logit)` against a target in `[0, 1]`.
pub fn binary_cross_entropy(logit: f64, target: f64) -> f64 {
    // log(1 + e^x) computed without overflow
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

// ---------------------------------------------------------------------------
// Masked-entity objective

/// One masked query: an encoder context, the gold entity, and the entities
/// the softmax runs over (must contain the gold).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub context: Vec<f64>,
    pub gold: EntityId,
    pub candidates: Vec<EntityId>,
}

/// Batch-averaged gradients; only touched entity rows are stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskedGradients {
    pub entity_rows: BTreeMap<EntityId, Vec<f64>>,
    pub context_projection: Option<Matrix>,
}

fn check_masked(params: &ModelParameters, ex: &MaskedExample) -> Result<usize> {
    if ex.context.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: ex.context.len(),
        });
    }
    if let Some(c) = ex.candidates.iter().find(|c| c.0 >= params.num_entities()) {
        return Err(Error::UnknownEntity(c.to_string()));
    }
    ex.candidates
        .iter()
        .position(|&c| c == ex.gold)
        .ok_or_else(|| Error::InvalidArgument(format!("gold {} missing from candidates", ex.gold)))
}

fn masked_logits(params: &ModelParameters, z: &[f64], candidates: &[EntityId]) -> Vec<f64> {
    candidates.iter().map(|c| linalg::dot(params.entity_table.row(c.0), z)).collect()
}

/// Mean smoothed cross-entropy over the batch.
pub fn masked_entity_loss(params: &ModelParameters, batch: &[MaskedExample], epsilon: f64) -> Result<f64> {
    Ok(masked_entity_step(params, batch, epsilon)?.0)
}

/// Mean loss and gradients. With `z = P·ctx` (or `z = ctx`) and
/// `g = softmax - q` over the candidates: `dE_j = g_j z`,
/// `dz = Σ g_j E_j`, `dP = dz ⊗ ctx`.
pub fn masked_entity_step(params: &ModelParameters, batch: &[MaskedExample], epsilon: f64) -> Result<(f64, MaskedGradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let d = params.dim();
    let mut grads = MaskedGradients {
        entity_rows: BTreeMap::new(),
        context_projection: params.context_projection.as_ref().map(|_| Matrix::zeros(d, d)),
    };
    let mut total = 0.0;
    for ex in batch {
        let target = check_masked(params, ex)?;
        let z = params.project_context(&ex.context);
        let logits = masked_logits(params, &z, &ex.candidates);
        let (loss, g) = cross_entropy_smoothed_grad(&logits, target, epsilon)?;
        total += loss;
        let mut dz = vec![0.0; d];
        for (&c, &gj) in ex.candidates.iter().zip(&g) {
            let row = grads.entity_rows.entry(c).or_insert_with(|| vec![0.0; d]);
            linalg::axpy(gj / n, &z, row);
            linalg::axpy(gj, params.entity_table.row(c.0), &mut dz);
        }
        if let Some(dp) = grads.context_projection.as_mut() {
            dp.add_outer(1.0 / n, &dz, &ex.context);
        }
    }
    Ok((total / n, grads))
}

pub fn apply_masked_gradients(params: &mut ModelParameters, grads: &MaskedGradients, lr: f64) {
    for (id, g) in &grads.entity_rows {
        linalg::axpy(-lr, g, params.entity_table.row_mut(id.0));
    }
    if let (Some(p), Some(g)) = (params.context_projection.as_mut(), grads.context_projection.as_ref()) {
        linalg::axpy(-lr, g.as_slice(), p.as_mut_slice());
    }
}

// ---------------------------------------------------------------------------
// Two-tower InfoNCE

/// A query encoding, its gold tail, and mined hard negatives. Other golds
/// in the same batch act as extra negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveExample {
    pub query: Vec<f64>,
    pub gold: EntityId,
    pub negatives: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGradients {
    pub query_projection: Matrix,
    pub tail_projection: Matrix,
}

/// Candidate list for example `i`: gold first, then in-batch golds, then
/// hard negatives, without repeats.
pub fn contrastive_candidates(batch: &[ContrastiveExample], i: usize) -> Vec<EntityId> {
    let ex = &batch[i];
    let mut seen = BTreeSet::from([ex.gold]);
    let mut out = vec![ex.gold];
    let others = batch.iter().map(|b| b.gold).chain(ex.negatives.iter().copied());
    for c in others {
        if seen.insert(c) {
            out.push(c);
        }
    }
    out
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cosine_grad(a: &[f64], b: &[f64], na: f64, nb: f64, cos: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na)).collect()
}

/// Mean InfoNCE loss with logits `cos(Pq x, Pt y_j) / τ`.
pub fn info_nce_loss(params: &ModelParameters, tails: &TailBank, batch: &[ContrastiveExample], tau: f64) -> Result<f64> {
    Ok(info_nce_step(params, tails, batch, tau)?.0)
}

/// Mean loss and gradients for both projections.
pub fn info_nce_step(
    params: &ModelParameters,
    tails: &TailBank,
    batch: &[ContrastiveExample],
    tau: f64,
) -> Result<(f64, ContrastiveGradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let d = params.dim();
    let n = batch.len() as f64;
    let mut grads = ContrastiveGradients {
        query_projection: Matrix::zeros(d, d),
        tail_projection: Matrix::zeros(d, d),
    };
    let mut projected: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.query.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: ex.query.len(),
            });
        }
        let q = params.query_projection.matvec(&ex.query);
        let nq = linalg::norm(&q);
        if nq == 0.0 {
            return Err(Error::ZeroVector);
        }
        let cands = contrastive_candidates(batch, i);
        let mut cos = Vec::with_capacity(cands.len());
        let mut norms = Vec::with_capacity(cands.len());
        for &c in &cands {
            if let std::collections::btree_map::Entry::Vacant(v) = projected.entry(c) {
                v.insert(params.tail_projection.matvec(tails.get(c)?.values()));
            }
            let t = &projected[&c];
            let nt = linalg::norm(t);
            if nt == 0.0 {
                return Err(Error::ZeroVector);
            }
            cos.push((linalg::dot(&q, t) / (nq * nt)).clamp(-1.0, 1.0));
            norms.push(nt);
        }
        let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
        let (loss, g) = cross_entropy_smoothed_grad(&logits, 0, 0.0)?;
        total += loss;
        let mut dq = vec![0.0; d];
        for (j, &c) in cands.iter().enumerate() {
            let t = &projected[&c];
            let w = g[j] / tau;
            linalg::axpy(w, &cosine_grad(&q, t, nq, norms[j], cos[j]), &mut dq);
            let dt = cosine_grad(t, &q, norms[j], nq, cos[j]);
            grads.tail_projection.add_outer(w / n, &dt, tails.get(c)?.values());
        }
        grads.query_projection.add_outer(1.0 / n, &dq, &ex.query);
    }
    Ok((total / n, grads))
}

pub fn apply_contrastive_gradients(params: &mut ModelParameters, grads: &ContrastiveGradients, lr: f64) {
    linalg::axpy(-lr, grads.query_projection.as_slice(), params.query_projection.as_mut_slice());
    linalg::axpy(-lr, grads.tail_projection.as_slice(), params.tail_projection.as_mut_slice());
}

// ---------------------------------------------------------------------------
// Joint classifier

/// Joint features of one candidate triple and its 0/1 label.
#[derive(Debug, Clone, PartialEq)]
pub struct JointExample {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGradients {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean BCE with labels smoothed to `y(1 - ε) + ε/2`.
pub fn joint_step(params: &ModelParameters, batch: &[JointExample], epsilon: f64) -> Result<(f64, JointGradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = JointGradients {
        weights: vec![0.0; params.dim()],
        bias: 0.0,
    };
    let mut total = 0.0;
    for ex in batch {
        if ex.features.len() != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                actual: ex.features.len(),
            });
        }
        let y = ex.label * (1.0 - epsilon) + epsilon / 2.0;
        let logit = linalg::dot(&params.classifier_weights, &ex.features) + params.classifier_bias;
        total += binary_cross_entropy(logit, y);
        let g = scoring::sigmoid(logit) - y;
        linalg::axpy(g / n, &ex.features, &mut grads.weights);
        grads.bias += g / n;
    }
    Ok((total / n, grads))
}

pub fn apply_joint_gradients(params: &mut ModelParameters, grads: &JointGradients, lr: f64) {
    linalg::axpy(-lr, &grads.weights, &mut params.classifier_weights);
    params.classifier_bias -= lr * grads.bias;
}

// ---------------------------------------------------------------------------
// Negatives, averaging, stopping

/// The `k` highest-scoring entities other than the gold and the filtered
/// set. Ties go to the smaller id; NaN scores sort last.
pub fn topk_hard_negatives(scores: &[f64], gold: EntityId, filtered: &BTreeSet<EntityId>, k: usize) -> Vec<EntityId> {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let mut pool: Vec<usize> = (0..scores.len())
        .filter(|&i| i != gold.0 && !filtered.contains(&EntityId(i)))
        .collect();
    pool.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    pool.into_iter().take(k).map(EntityId).collect()
}

/// `shadow ← decay·shadow + (1 - decay)·params`
pub fn ema_update(shadow: &mut ModelParameters, params: &ModelParameters, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    shadow.zip_mut(params, |s, p| {
        for (si, pi) in s.iter_mut().zip(p) {
            *si = decay * *si + (1.0 - decay) * pi;
        }
    })
}

/// Whether training should stop given the validation history so far
/// (higher is better). An evaluation improves when it beats the best
/// earlier value by more than `min_delta`; training stops once `patience`
/// evaluations in a row have failed to improve.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for &v in history {
        if v > best + min_delta || best == f64::NEG_INFINITY {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    !history.is_empty() && since >= patience.max(1)
}

// ---------------------------------------------------------------------------
// Trainer

/// Everything a run needs to continue where it left off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub kind: ModelKind,
    pub params: ModelParameters,
    pub ema: Option<ModelParameters>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    /// Filtered valid hits@1 after each epoch.
    pub valid_history: Vec<f64>,
    pub best_valid: Option<f64>,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
}

impl TrainingState {
    /// EMA weights when averaging is on, raw weights otherwise.
    pub fn eval_params(&self) -> &ModelParameters {
        self.ema.as_ref().unwrap_or(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub timestamp_ms: u64,
}

impl LogRecord {
    pub fn new(step: usize, epoch: usize, metrics: BTreeMap<String, f64>) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Self {
            step,
            epoch,
            metrics,
            timestamp_ms,
        }
    }
}

/// Observer attached to a [`Trainer`].
pub trait TrainerPlugin {
    fn on_log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &TrainingState) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per log record.
pub struct JsonlLogger {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlLogger {
    pub fn append(path: &Path) -> Result<Self> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }
}

impl TrainerPlugin for JsonlLogger {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
}

impl TrainerPlugin for MemoryLog {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

impl<P: TrainerPlugin + ?Sized> TrainerPlugin for &mut P {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        (**self).on_log(record)
    }

    fn on_epoch_end(&mut self, state: &TrainingState) -> Result<()> {
        (**self).on_epoch_end(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub known: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub gold: EntityId,
}

/// Train-split queries in split order, directions in the order given.
pub fn training_queries(kg: &KnowledgeGraph, directions: Directions) -> Vec<Query> {
    kg.split(Split::Train)
        .iter()
        .flat_map(|t| {
            directions.list().iter().map(move |&direction| match direction {
                Direction::PredictTail => Query {
                    known: t.head,
                    relation: t.relation,
                    direction,
                    gold: t.tail,
                },
                Direction::PredictHead => Query {
                    known: t.tail,
                    relation: t.relation,
                    direction,
                    gold: t.head,
                },
            })
        })
        .collect()
}

/// Filtered ranking of `split` with the scorer matching `kind`.
pub fn evaluate_params(
    kind: ModelKind,
    kg: &KnowledgeGraph,
    params: &ModelParameters,
    encoder: &dyn Encoder,
    ser: &SerializeConfig,
    filter: &FilterIndex,
    split: Split,
    directions: Directions,
) -> Result<(MetricsReport, Vec<RankResult>)> {
    match kind {
        ModelKind::MaskedEntity => {
            let model = MaskedEntityModel::new(kg, params, encoder, ser);
            eval::link_prediction_eval(&model, kg, split, filter, directions)
        }
        ModelKind::TwoTower => {
            let model = TwoTowerModel::new(kg, params, encoder, ser)?;
            eval::link_prediction_eval(&model, kg, split, filter, directions)
        }
        ModelKind::Joint => {
            let model = JointModel {
                kg,
                params,
                encoder,
                cfg: ser,
            };
            eval::link_prediction_eval(&model, kg, split, filter, directions)
        }
        other => Err(Error::InvalidArgument(format!("{other} has no trainable parameters to evaluate"))),
    }
}

/// Encodings that stay fixed for the whole run.
enum Prepared {
    Masked { contexts: Vec<Vec<f64>> },
    TwoTower { queries: Vec<Vec<f64>>, tails: TailBank },
    Joint,
}

pub struct Trainer<'a> {
    kg: &'a KnowledgeGraph,
    encoder: &'a dyn Encoder,
    ser: &'a SerializeConfig,
    cfg: TrainerConfig,
    kind: ModelKind,
    filter: FilterIndex,
    queries: Vec<Query>,
    prepared: Option<Prepared>,
    plugins: Vec<Box<dyn TrainerPlugin + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        kg: &'a KnowledgeGraph,
        encoder: &'a dyn Encoder,
        ser: &'a SerializeConfig,
        cfg: TrainerConfig,
        kind: ModelKind,
    ) -> Result<Self> {
        cfg.validate()?;
        ser.validate()?;
        if !kind.is_trainable() {
            return Err(Error::InvalidArgument(format!("model kind {kind} is not trainable")));
        }
        if encoder.dim() != cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.dim,
                actual: encoder.dim(),
            });
        }
        let queries = training_queries(kg, cfg.directions);
        if queries.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        Ok(Self {
            kg,
            encoder,
            ser,
            filter: FilterIndex::build(kg),
            queries,
            cfg,
            kind,
            prepared: None,
            plugins: Vec::new(),
        })
    }

    pub fn with_plugin(mut self, plugin: impl TrainerPlugin + 'a) -> Self {
        self.plugins.push(Box::new(plugin));
        self
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn filter(&self) -> &FilterIndex {
        &self.filter
    }

    /// Fresh parameters and, when averaging is on, an identical shadow.
    pub fn init_state(&self) -> Result<TrainingState> {
        let mut params = ModelParameters::init(
            self.kg.num_entities(),
            self.kg.num_relations(),
            self.cfg.dim,
            self.cfg.init_scale,
            self.cfg.temperature,
            self.cfg.seed,
        )?;
        if self.cfg.context_projection {
            params.context_projection = Some(Matrix::identity(self.cfg.dim));
        }
        let ema = (self.cfg.ema_decay > 0.0).then(|| params.clone());
        Ok(TrainingState {
            kind: self.kind,
            params,
            ema,
            epoch: 0,
            step: 0,
            valid_history: Vec::new(),
            best_valid: None,
            epochs_since_improvement: 0,
            stopped_early: false,
        })
    }

    fn prepare(&mut self) -> Result<()> {
        if self.prepared.is_some() {
            return Ok(());
        }
        let prepared = match self.kind {
            ModelKind::MaskedEntity => {
                let seqs = self
                    .queries
                    .iter()
                    .map(|q| serialize::encode_masked_query(self.kg, q.known, q.relation, q.direction, self.ser))
                    .collect::<Result<Vec<_>>>()?;
                Prepared::Masked {
                    contexts: into_values(self.encoder.encode_batch(&seqs)?),
                }
            }
            ModelKind::TwoTower => {
                let seqs = self
                    .queries
                    .iter()
                    .map(|q| serialize::encode_query_pair(self.kg, q.known, q.relation, q.direction, self.ser))
                    .collect::<Result<Vec<_>>>()?;
                Prepared::TwoTower {
                    queries: into_values(self.encoder.encode_batch(&seqs)?),
                    tails: TailBank::build(self.kg, self.encoder, self.ser)?,
                }
            }
            _ => Prepared::Joint,
        };
        self.prepared = Some(prepared);
        Ok(())
    }

    /// Runs epochs until the configured count or early stopping. Passing a
    /// restored state resumes it.
    pub fn fit(&mut self, state: Option<TrainingState>) -> Result<TrainingState> {
        let mut state = match state {
            Some(s) => {
                if s.kind != self.kind {
                    return Err(Error::InvalidArgument(format!(
                        "state was trained as {}, trainer is {}",
                        s.kind, self.kind
                    )));
                }
                s
            }
            None => self.init_state()?,
        };
        self.prepare()?;
        while state.epoch < self.cfg.effective_epochs() && !state.stopped_early {
            self.run_epoch(&mut state)?;
            for p in &mut self.plugins {
                p.on_epoch_end(&state)?;
            }
        }
        Ok(state)
    }

    fn run_epoch(&mut self, state: &mut TrainingState) -> Result<()> {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(linalg::derive_seed(self.cfg.seed, epoch as u64 + 1));
        let negatives = self.mine_negatives(&state.params)?;
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let batches = order.chunks(self.cfg.batch_size);
        let limit = self.cfg.max_batches().unwrap_or(usize::MAX);
        for batch in batches.take(limit) {
            let loss = self.training_step(state, batch, &negatives)?;
            losses.push(loss);
            self.log(LogRecord::new(state.step, epoch, BTreeMap::from([("loss".to_string(), loss)])))?;
        }
        state.epoch += 1;
        let mut metrics = BTreeMap::from([(
            "train_loss".to_string(),
            losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        )]);
        if let Some(report) = self.evaluate_step(state)? {
            metrics.insert("valid_mrr".into(), report.mrr);
            metrics.insert("valid_hits1".into(), report.hits1);
            state.valid_history.push(report.hits1);
            if state.best_valid.is_none_or(|b| report.hits1 > b + self.cfg.min_delta) {
                state.best_valid = Some(report.hits1);
                state.epochs_since_improvement = 0;
            } else {
                state.epochs_since_improvement += 1;
            }
            state.stopped_early = early_stop_check(&state.valid_history, self.cfg.patience, self.cfg.min_delta);
        }
        self.log(LogRecord::new(state.step, state.epoch, metrics))
    }

    /// Per-query hard negatives under the current raw parameters; `None`
    /// when the full softmax is used.
    fn mine_negatives(&self, params: &ModelParameters) -> Result<Option<Vec<Vec<EntityId>>>> {
        let k = self.cfg.negatives_k;
        if k == 0 && self.kind != ModelKind::Joint {
            return Ok(None);
        }
        let k = if k == 0 { self.kg.num_entities() } else { k };
        let empty = BTreeSet::new();
        let (kg, encoder, ser, queries, filter, prepared) =
            (self.kg, self.encoder, self.ser, &self.queries, &self.filter, &self.prepared);
        let scores_for = |i: usize| -> Result<Vec<f64>> {
            let q = &queries[i];
            match prepared.as_ref() {
                Some(Prepared::Masked { contexts }) => {
                    let z = params.project_context(&contexts[i]);
                    Ok(params.entity_table.matvec(&z))
                }
                Some(Prepared::TwoTower { queries, tails }) => {
                    let model = TwoTowerModel::with_bank(kg, params, encoder, ser, tails);
                    model.score_query_vector(&params.query_projection.matvec(&queries[i]))
                }
                _ => JointModel {
                    kg,
                    params,
                    encoder,
                    cfg: ser,
                }
                .score_candidates_for(q),
            }
        };
        let mined = (0..queries.len())
            .into_par_iter()
            .map(|i| {
                let q = &queries[i];
                let filtered = filter.known_answers(q.known, q.relation, q.direction).unwrap_or(&empty);
                Ok(topk_hard_negatives(&scores_for(i)?, q.gold, filtered, k))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(mined))
    }

    /// One SGD update on the queries at `batch` (indices into the training
    /// queries). Returns the batch loss.
    pub fn training_step(
        &mut self,
        state: &mut TrainingState,
        batch: &[usize],
        negatives: &Option<Vec<Vec<EntityId>>>,
    ) -> Result<f64> {
        self.prepare()?;
        let lr = self.cfg.learning_rate;
        let all: Vec<EntityId> = (0..self.kg.num_entities()).map(EntityId).collect();
        let loss = match self.prepared.as_ref() {
            Some(Prepared::Masked { contexts }) => {
                let examples: Vec<MaskedExample> = batch
                    .iter()
                    .map(|&i| {
                        let gold = self.queries[i].gold;
                        let candidates = match negatives {
                            Some(n) => std::iter::once(gold).chain(n[i].iter().copied()).collect(),
                            None => all.clone(),
                        };
                        MaskedExample {
                            context: contexts[i].clone(),
                            gold,
                            candidates,
                        }
                    })
                    .collect();
                let (loss, grads) = masked_entity_step(&state.params, &examples, self.cfg.label_smoothing)?;
                apply_masked_gradients(&mut state.params, &grads, lr);
                loss
            }
            Some(Prepared::TwoTower { queries, tails }) => {
                let examples: Vec<ContrastiveExample> = batch
                    .iter()
                    .map(|&i| ContrastiveExample {
                        query: queries[i].clone(),
                        gold: self.queries[i].gold,
                        negatives: negatives.as_ref().map_or_else(Vec::new, |n| n[i].clone()),
                    })
                    .collect();
                let (loss, grads) = info_nce_step(&state.params, tails, &examples, state.params.temperature)?;
                apply_contrastive_gradients(&mut state.params, &grads, lr);
                loss
            }
            _ => {
                let mut examples = Vec::new();
                for &i in batch {
                    let q = self.queries[i];
                    let negs = negatives.as_ref().map_or(&[][..], |n| &n[i][..]);
                    for (c, label) in std::iter::once((q.gold, 1.0)).chain(negs.iter().map(|&n| (n, 0.0))) {
                        let triple = JointModel::candidate_triple(q.known, q.relation, q.direction, c);
                        let seq = serialize::encode_joint_triple(self.kg, &triple, self.ser)?;
                        examples.push(JointExample {
                            features: self.encoder.encode(&seq)?.into_values(),
                            label,
                        });
                    }
                }
                let (loss, grads) = joint_step(&state.params, &examples, self.cfg.label_smoothing)?;
                apply_joint_gradients(&mut state.params, &grads, lr);
                loss
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at epoch {} step {}",
                state.epoch, state.step
            )));
        }
        state.params.validate()?;
        if let Some(ema) = state.ema.as_mut() {
            ema_update(ema, &state.params, self.cfg.ema_decay)?;
        }
        state.step += 1;
        Ok(loss)
    }

    /// Validation metrics on the evaluation weights, or `None` without a
    /// validation split.
    pub fn evaluate_step(&self, state: &TrainingState) -> Result<Option<MetricsReport>> {
        if self.kg.split(Split::Valid).is_empty() {
            return Ok(None);
        }
        let (report, _) = evaluate_params(
            self.kind,
            self.kg,
            state.eval_params(),
            self.encoder,
            self.ser,
            &self.filter,
            Split::Valid,
            self.cfg.directions,
        )?;
        Ok(Some(report))
    }

    pub fn log(&mut self, record: LogRecord) -> Result<()> {
        for p in &mut self.plugins {
            p.on_log(&record)?;
        }
        Ok(())
    }
}

fn into_values(v: Vec<EmbeddingVector>) -> Vec<Vec<f64>> {
    v.into_iter().map(EmbeddingVector::into_values).collect()
}

impl JointModel<'_> {
    fn score_candidates_for(&self, q: &Query) -> Result<Vec<f64>> {
        use crate::eval::LinkScorer;
        self.score_candidates(q.known, q.relation, q.direction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_targets_sum_to_one() {
        let q = smoothed_targets(4, 2, 0.1).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((q[2] - (0.9 + 0.025)).abs() < 1e-12);
        assert!((q[0] - 0.025).abs() < 1e-12);
        assert!(smoothed_targets(3, 3, 0.1).is_err());
        assert!(smoothed_targets(3, 0, 1.0).is_err());
        assert!(smoothed_targets(1, 0, 0.1).is_err());
        assert!(cross_entropy_smoothed(&[f64::NAN, 0.0], 0, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // uniform logits: loss is ln K regardless of smoothing
        let l = cross_entropy_smoothed(&[0.0; 5], 1, 0.3).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let l = cross_entropy_smoothed(&[2.0, 0.0], 0, 0.0).unwrap();
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_is_stable() {
        assert!(binary_cross_entropy(1000.0, 1.0) < 1e-12);
        assert!((binary_cross_entropy(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
        assert!((binary_cross_entropy(0.0, 0.3) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hard_negatives_skip_gold_and_filtered() {
        let scores = [0.5, 0.9, 0.9, 0.1, f64::NAN, 0.7];
        let filtered = BTreeSet::from([EntityId(5)]);
        let negs = topk_hard_negatives(&scores, EntityId(0), &filtered, 3);
        assert_eq!(negs, vec![EntityId(1), EntityId(2), EntityId(3)]);
        assert_eq!(topk_hard_negatives(&scores, EntityId(0), &filtered, 10).len(), 4);
    }

    #[test]
    fn early_stopping_counts_non_improving_evaluations() {
        assert!(!early_stop_check(&[], 1, 0.0));
        assert!(!early_stop_check(&[0.1, 0.2, 0.3], 2, 0.0));
        assert!(!early_stop_check(&[0.3, 0.3], 2, 0.0));
        assert!(early_stop_check(&[0.3, 0.3, 0.3], 2, 0.0));
        // below min_delta does not count as improvement
        assert!(early_stop_check(&[0.3, 0.30005, 0.3001], 2, 1e-3));
        assert!(!early_stop_check(&[0.3, 0.2, 0.5], 2, 0.0));
    }

    #[test]
    fn ema_moves_toward_params() {
        let mut a = ModelParameters::init(3, 2, 4, 0.1, 0.05, 1).unwrap();
        let b = ModelParameters::init(3, 2, 4, 0.1, 0.05, 2).unwrap();
        let before = a.entity_table.get(0, 0);
        ema_update(&mut a, &b, 0.9).unwrap();
        let expect = 0.9 * before + 0.1 * b.entity_table.get(0, 0);
        assert!((a.entity_table.get(0, 0) - expect).abs() < 1e-15);
        let mut c = a.clone();
        ema_update(&mut c, &b, 0.0).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn masked_gradient_matches_finite_difference() {
        let mut params = ModelParameters::init(4, 1, 3, 0.5, 0.05, 7).unwrap();
        params.context_projection = Some(Matrix::from_rows(vec![vec![1.0, 0.2, 0.0], vec![0.0, 0.9, -0.3], vec![0.1, 0.0, 1.1]]).unwrap());
        let batch = vec![
            MaskedExample {
                context: vec![0.3, -0.4, 0.8],
                gold: EntityId(2),
                candidates: vec![EntityId(2), EntityId(0), EntityId(3)],
            },
            MaskedExample {
                context: vec![-0.1, 0.7, 0.2],
                gold: EntityId(1),
                candidates: (0..4).map(EntityId).collect(),
            },
        ];
        let (_, g) = masked_entity_step(&params, &batch, 0.1).unwrap();
        let h = 1e-6;
        for (id, row) in &g.entity_rows {
            for c in 0..3 {
                let mut p = params.clone();
                p.entity_table.set(id.0, c, params.entity_table.get(id.0, c) + h);
                let up = masked_entity_loss(&p, &batch, 0.1).unwrap();
                p.entity_table.set(id.0, c, params.entity_table.get(id.0, c) - h);
                let down = masked_entity_loss(&p, &batch, 0.1).unwrap();
                assert!(((up - down) / (2.0 * h) - row[c]).abs() < 1e-7);
            }
        }
        let dp = g.context_projection.unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let base = params.context_projection.as_ref().unwrap().get(r, c);
                let mut p = params.clone();
                p.context_projection.as_mut().unwrap().set(r, c, base + h);
                let up = masked_entity_loss(&p, &batch, 0.1).unwrap();
                p.context_projection.as_mut().unwrap().set(r, c, base - h);
                let down = masked_entity_loss(&p, &batch, 0.1).unwrap();
                assert!(((up - down) / (2.0 * h) - dp.get(r, c)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn joint_gradient_matches_finite_difference() {
        let mut params = ModelParameters::init(2, 1, 3, 0.5, 0.05, 3).unwrap();
        params.classifier_weights = vec![0.2, -0.5, 0.3];
        params.classifier_bias = 0.1;
        let batch = vec![
            JointExample {
                features: vec![0.3, 0.1, -0.2],
                label: 1.0,
            },
            JointExample {
                features: vec![-0.6, 0.4, 0.9],
                label: 0.0,
            },
        ];
        let (_, g) = joint_step(&params, &batch, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = params.clone();
            p.classifier_weights[i] += h;
            let up = joint_step(&p, &batch, 0.1).unwrap().0;
            p.classifier_weights[i] -= 2.0 * h;
            let down = joint_step(&p, &batch, 0.1).unwrap().0;
            assert!(((up - down) / (2.0 * h) - g.weights[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn contrastive_candidates_dedupe() {
        let ex = |g: usize, n: &[usize]| ContrastiveExample {
            query: vec![1.0, 0.0],
            gold: EntityId(g),
            negatives: n.iter().copied().map(EntityId).collect(),
        };
        let batch = vec![ex(1, &[2, 3]), ex(2, &[1, 4]), ex(1, &[])];
        assert_eq!(contrastive_candidates(&batch, 0), vec![EntityId(1), EntityId(2), EntityId(3)]);
        assert_eq!(contrastive_candidates(&batch, 1), vec![EntityId(2), EntityId(1), EntityId(4)]);
    }

    #[test]
    fn model_kind_parses() {
        assert_eq!("two-tower".parse::<ModelKind>().unwrap(), ModelKind::TwoTower);
        assert!(!ModelKind::Llm.is_trainable());
        assert!("bert".parse::<ModelKind>().is_err());
    }
}
