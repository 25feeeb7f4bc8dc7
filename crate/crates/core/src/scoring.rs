//! Triple scoring: joint classifier, two-tower cosine, masked-entity softmax,
//! teacher-forced generation score, and trie-constrained entity decoding.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, Triple};
use crate::linalg::{self, Matrix};
use crate::logprob::LogProbProvider;
use crate::serialize::{self, SerializeConfig};

/// Trainable state. Row `i` of `entity_table` belongs to entity `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub entity_table: Matrix,
    pub relation_table: Matrix,
    /// Query-tower projection of the two-tower model.
    pub query_projection: Matrix,
    /// Tail-tower projection of the two-tower model.
    pub tail_projection: Matrix,
    /// Optional map applied to the encoder context before masked-entity
    /// scoring.
    pub context_projection: Option<Matrix>,
    pub classifier_weights: Vec<f64>,
    pub classifier_bias: f64,
    pub temperature: f64,
}

impl ModelParameters {
    /// Gaussian entity/relation rows (std `init_scale`), identity
    /// projections, zero classifier.
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, init_scale: f64, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self {
            entity_table: Matrix::random_normal(num_entities, dim, init_scale, &mut rng),
            relation_table: Matrix::random_normal(num_relations, dim, init_scale, &mut rng),
            query_projection: Matrix::identity(dim),
            tail_projection: Matrix::identity(dim),
            context_projection: None,
            classifier_weights: vec![0.0; dim],
            classifier_bias: 0.0,
            temperature,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.entity_table.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_table.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (name, m) in [("relation_table", &self.relation_table)] {
            if m.cols() != d {
                return Err(Error::InvalidArgument(format!("{name} has {} columns, expected {d}", m.cols())));
            }
        }
        for m in [Some(&self.query_projection), Some(&self.tail_projection), self.context_projection.as_ref()]
            .into_iter()
            .flatten()
        {
            if m.shape() != (d, d) {
                return Err(Error::InvalidArgument(format!("projection has shape {:?}, expected ({d}, {d})", m.shape())));
            }
        }
        if self.classifier_weights.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.classifier_weights.len(),
            });
        }
        let finite = self.entity_table.is_finite()
            && self.relation_table.is_finite()
            && self.query_projection.is_finite()
            && self.tail_projection.is_finite()
            && self.context_projection.as_ref().is_none_or(Matrix::is_finite)
            && self.classifier_weights.iter().all(|w| w.is_finite())
            && self.classifier_bias.is_finite();
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Visits every matrix/vector of `self` together with the matching
    /// one of `other`. Shapes must agree.
    pub(crate) fn zip_mut(&mut self, other: &ModelParameters, mut f: impl FnMut(&mut [f64], &[f64])) -> Result<()> {
        self.entity_table.check_same_shape(&other.entity_table)?;
        self.relation_table.check_same_shape(&other.relation_table)?;
        self.query_projection.check_same_shape(&other.query_projection)?;
        self.tail_projection.check_same_shape(&other.tail_projection)?;
        match (&self.context_projection, &other.context_projection) {
            (Some(a), Some(b)) => a.check_same_shape(b)?,
            (None, None) => {}
            _ => return Err(Error::InvalidArgument("context projection present on only one side".into())),
        }
        if self.classifier_weights.len() != other.classifier_weights.len() {
            return Err(Error::InvalidArgument("classifier size mismatch".into()));
        }
        f(self.entity_table.as_mut_slice(), other.entity_table.as_slice());
        f(self.relation_table.as_mut_slice(), other.relation_table.as_slice());
        f(self.query_projection.as_mut_slice(), other.query_projection.as_slice());
        f(self.tail_projection.as_mut_slice(), other.tail_projection.as_slice());
        if let (Some(a), Some(b)) = (&mut self.context_projection, &other.context_projection) {
            f(a.as_mut_slice(), b.as_slice());
        }
        f(&mut self.classifier_weights, &other.classifier_weights);
        f(std::slice::from_mut(&mut self.classifier_bias), std::slice::from_ref(&other.classifier_bias));
        Ok(())
    }

    /// Context vector after the optional projection.
    pub fn project_context(&self, context: &[f64]) -> Vec<f64> {
        match &self.context_projection {
            Some(p) => p.matvec(context),
            None => context.to_vec(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Classifier probability for pre-computed joint features.
pub fn joint_probability(params: &ModelParameters, features: &[f64]) -> Result<f64> {
    if features.len() != params.classifier_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: params.classifier_weights.len(),
            actual: features.len(),
        });
    }
    Ok(sigmoid(linalg::dot(&params.classifier_weights, features) + params.classifier_bias))
}

/// `sigmoid(w · enc([CLS] Xh [SEP] Xr [SEP] Xt [SEP]) + b)`
pub fn score_joint(
    params: &ModelParameters,
    encoder: &dyn Encoder,
    kg: &KnowledgeGraph,
    triple: &Triple,
    cfg: &SerializeConfig,
) -> Result<f64> {
    let seq = serialize::encode_joint_triple(kg, triple, cfg)?;
    joint_probability(params, encoder.encode(&seq)?.values())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Bare cosine between the query-tower and tail-tower embeddings.
pub fn score_two_tower(query: &EmbeddingVector, tail: &EmbeddingVector) -> Result<f64> {
    cosine(query.values(), tail.values())
}

/// Log-softmax over `candidates` of `entity_table[j] · context'`, where
/// `context'` is the projected context when a projection is configured.
pub fn score_masked_entity(params: &ModelParameters, context: &EmbeddingVector, candidates: &[EntityId]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if context.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: context.dim(),
        });
    }
    let z = params.project_context(context.values());
    let logits = candidates
        .iter()
        .map(|&c| {
            if c.0 >= params.num_entities() {
                return Err(Error::UnknownEntity(c.to_string()));
            }
            Ok(linalg::dot(params.entity_table.row(c.0), &z))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(log_softmax(&logits))
}

/// Teacher-forced `Σ_i log p(target_i | context ⧺ target_<i)`.
pub fn score_generation(lp: &dyn LogProbProvider, context: &[String], target: &[String]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty generation target".into()));
    }
    let mut prefix = context.to_vec();
    let mut total = 0.0;
    for tok in target {
        let i = lp.token_index(tok).ok_or_else(|| Error::OutOfVocabulary(tok.clone()))?;
        total += lp.next_token_logprobs(&prefix)[i];
        prefix.push(tok.clone());
    }
    Ok(total)
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<String, usize>,
    /// Entities whose full name ends here (several when names collide).
    entities: Vec<EntityId>,
    /// Smallest entity id in this subtree, for deterministic tie-breaks.
    min_entity: Option<EntityId>,
}

/// Prefix tree over tokenized entity names.
#[derive(Debug, Clone)]
pub struct EntityTrie {
    nodes: Vec<TrieNode>,
    len: usize,
}

impl EntityTrie {
    pub fn from_entries(entries: impl IntoIterator<Item = (EntityId, Vec<String>)>) -> Result<Self> {
        let mut trie = Self {
            nodes: vec![TrieNode::default()],
            len: 0,
        };
        for (id, tokens) in entries {
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(format!("entity {id} has no tokens")));
            }
            let mut node = 0;
            trie.touch(node, id);
            for tok in tokens {
                node = match trie.nodes[node].children.get(&tok) {
                    Some(&n) => n,
                    None => {
                        let n = trie.nodes.len();
                        trie.nodes.push(TrieNode::default());
                        trie.nodes[node].children.insert(tok, n);
                        n
                    }
                };
                trie.touch(node, id);
            }
            trie.nodes[node].entities.push(id);
            trie.nodes[node].entities.sort_unstable();
            trie.len += 1;
        }
        Ok(trie)
    }

    fn touch(&mut self, node: usize, id: EntityId) {
        let m = &mut self.nodes[node].min_entity;
        *m = Some(m.map_or(id, |x| x.min(id)));
    }

    /// One path per entity, using the serializer's tokenizer on names.
    pub fn build(kg: &KnowledgeGraph, cfg: &SerializeConfig) -> Result<Self> {
        let entries = kg
            .entities()
            .iter()
            .map(|e| (e.id, serialize::tokenize(&e.name, cfg)))
            .collect::<Vec<_>>();
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All `(entity, tokens)` paths, ordered by entity id.
    pub fn entries(&self) -> Vec<(EntityId, Vec<String>)> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![(0usize, Vec::<String>::new())];
        while let Some((node, path)) = stack.pop() {
            for &e in &self.nodes[node].entities {
                out.push((e, path.clone()));
            }
            for (tok, &child) in &self.nodes[node].children {
                let mut p = path.clone();
                p.push(tok.clone());
                stack.push((child, p));
            }
        }
        out.sort();
        out
    }

    /// Fixture format: one `entity_id\ttoken token ...` line per entity.
    pub fn to_fixture(&self) -> String {
        let mut out = String::new();
        for (id, toks) in self.entries() {
            let _ = writeln!(out, "{}\t{}", id.0, toks.join(" "));
        }
        out
    }

    pub fn parse_fixture(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, toks) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed("<trie>", i + 1, "expected \"id<TAB>tokens\""))?;
            let id = id
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::malformed("<trie>", i + 1, e.to_string()))?;
            entries.push((EntityId(id), toks.split_whitespace().map(str::to_string).collect()));
        }
        Self::from_entries(entries)
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    node: usize,
    tokens: Vec<String>,
    score: f64,
}

fn by_score_then_id(a: (f64, EntityId), b: (f64, EntityId)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Beam search restricted to trie continuations. A hypothesis that reaches
/// an entity's final token yields that entity; hypotheses keep expanding
/// while longer names share the prefix. Results are sorted by total
/// log-probability, ties by ascending id, and capped at `beam`.
pub fn decode_constrained(lp: &dyn LogProbProvider, context: &[String], trie: &EntityTrie, beam: usize) -> Result<Vec<(EntityId, f64)>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let mut finished: Vec<(EntityId, f64)> = Vec::new();
    let mut live = vec![Hypothesis {
        node: 0,
        tokens: Vec::new(),
        score: 0.0,
    }];
    while !live.is_empty() {
        let mut expansions = Vec::new();
        for hyp in &live {
            let node = &trie.nodes[hyp.node];
            if node.children.is_empty() {
                continue;
            }
            let mut prefix = context.to_vec();
            prefix.extend(hyp.tokens.iter().cloned());
            let logprobs = lp.next_token_logprobs(&prefix);
            for (tok, &child) in &node.children {
                let Some(i) = lp.token_index(tok) else { continue };
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok.clone());
                expansions.push(Hypothesis {
                    node: child,
                    tokens,
                    score: hyp.score + logprobs[i],
                });
            }
        }
        expansions.sort_by(|a, b| {
            let ka = (a.score, trie.nodes[a.node].min_entity.unwrap_or(EntityId(usize::MAX)));
            let kb = (b.score, trie.nodes[b.node].min_entity.unwrap_or(EntityId(usize::MAX)));
            by_score_then_id(ka, kb)
        });
        expansions.truncate(beam);
        for hyp in &expansions {
            finished.extend(trie.nodes[hyp.node].entities.iter().map(|&e| (e, hyp.score)));
        }
        live = expansions;
    }
    finished.sort_by(|a, b| by_score_then_id((a.1, a.0), (b.1, b.0)));
    finished.truncate(beam);
    Ok(finished)
}
