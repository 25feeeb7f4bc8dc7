//! Downstream uses of a trained masked-entity model: link prediction,
//! one-hop question answering, next-item recommendation, and cloze-style
//! fact probing with pluggable entity embeddings.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::graph::{EntityId, FilterIndex, KnowledgeGraph, RelationId};
use crate::linalg::{self, Matrix};
use crate::models::MaskedEntityModel;
use crate::scoring::{self, ModelParameters};
use crate::serialize::{parse_marked_text, Direction, SpecialToken, Token, TokenSequence};
use crate::training::{self, MaskedExample, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub entity: EntityId,
    pub score: f64,
}

/// Best `top_n` indices of `scores` skipping `excluded`; ties go to the
/// smaller index.
fn top_indices(scores: &[f64], excluded: &BTreeSet<usize>, top_n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(top_n).map(|i| (i, scores[i])).collect()
}

fn ranked(scores: &[f64], excluded: &BTreeSet<usize>, top_n: usize) -> Vec<Ranked> {
    top_indices(scores, excluded, top_n)
        .into_iter()
        .map(|(i, score)| Ranked {
            entity: EntityId(i),
            score,
        })
        .collect()
}

/// Ranks every entity as the answer to `(known, relation, ?)` (or
/// `(?, relation, known)`). With a filter, other known answers are removed
/// while `keep` (typically the gold) stays.
pub fn kgc_predict(
    model: &MaskedEntityModel<'_>,
    known: EntityId,
    relation: RelationId,
    direction: Direction,
    filter: Option<(&FilterIndex, Option<EntityId>)>,
    top_n: usize,
) -> Result<Vec<Ranked>> {
    model.kg.entity(known)?;
    model.kg.relation(relation)?;
    let seq = model.query_sequence(known, relation, direction)?;
    let scores = model.score_context(&model.encode(&seq)?)?;
    let mut excluded = BTreeSet::new();
    if let Some((f, keep)) = filter {
        if let Some(answers) = f.known_answers(known, relation, direction) {
            excluded.extend(answers.iter().filter(|&&a| Some(a) != keep).map(|a| a.0));
        }
    }
    Ok(ranked(&scores, &excluded, top_n))
}

/// `[CLS] question [SEP] [MASK] [SEP]`. Special-token renderings inside
/// the question (`[SEP]`, `[E3]`, ...) become special tokens; an overlong
/// question keeps its first tokens.
pub fn qa_sequence(question: &str, model: &MaskedEntityModel<'_>) -> Result<TokenSequence> {
    let mut body = parse_marked_text(question, model.cfg);
    if body.is_empty() {
        return Err(Error::InvalidArgument("empty question".into()));
    }
    body.truncate(model.cfg.max_len.saturating_sub(4));
    let mut items = vec![Token::Special(SpecialToken::Cls)];
    items.extend(body);
    items.extend([SpecialToken::Sep, SpecialToken::Mask, SpecialToken::Sep].map(Token::Special));
    TokenSequence::new(items, model.cfg.max_len)
}

pub fn qa_answer(model: &MaskedEntityModel<'_>, question: &str, top_n: usize) -> Result<Vec<Ranked>> {
    let seq = qa_sequence(question, model)?;
    let scores = model.score_context(&model.encode(&seq)?)?;
    Ok(ranked(&scores, &BTreeSet::new(), top_n))
}

/// Unfiltered ranking metrics of the gold answers.
pub fn qa_eval(model: &MaskedEntityModel<'_>, items: &[QaItem]) -> Result<MetricsReport> {
    let ranks = items
        .iter()
        .map(|it| {
            let seq = qa_sequence(&it.question, model)?;
            let scores = model.score_context(&model.encode(&seq)?)?;
            eval::rank_gold(&scores, it.gold, &BTreeSet::new())
        })
        .collect::<Result<Vec<_>>>()?;
    eval::compute_metrics(&ranks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionHistory {
    pub user: String,
    /// Oldest first.
    pub items: Vec<EntityId>,
}

/// `[CLS] [E i1] ... [E im] [MASK] [SEP]` over the most recent
/// `max_len - 3` items.
pub fn recommendation_sequence(items: &[EntityId], max_len: usize) -> Result<TokenSequence> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty interaction history".into()));
    }
    let keep = max_len.saturating_sub(3);
    let recent = &items[items.len().saturating_sub(keep)..];
    let mut seq = vec![Token::Special(SpecialToken::Cls)];
    seq.extend(recent.iter().map(|&i| Token::Special(SpecialToken::Entity(i))));
    seq.extend([SpecialToken::Mask, SpecialToken::Sep].map(Token::Special));
    TokenSequence::new(seq, max_len)
}

/// Next-item ranking; items already in the history are never returned.
pub fn recommend_next(model: &MaskedEntityModel<'_>, history: &InteractionHistory, top_n: usize) -> Result<Vec<Ranked>> {
    for &i in &history.items {
        model.kg.entity(i)?;
    }
    let seq = recommendation_sequence(&history.items, model.cfg.max_len)?;
    let scores = model.score_context(&model.encode(&seq)?)?;
    let seen: BTreeSet<usize> = history.items.iter().map(|i| i.0).collect();
    Ok(ranked(&scores, &seen, top_n))
}

/// Full-softmax masked-entity training on every history prefix, predicting
/// the item that follows it.
pub fn train_recommender(
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    max_len: usize,
    histories: &[InteractionHistory],
    cfg: &TrainerConfig,
) -> Result<ModelParameters> {
    let mut examples = Vec::new();
    let all: Vec<EntityId> = (0..kg.num_entities()).map(EntityId).collect();
    for h in histories {
        for p in 1..h.items.len() {
            let seq = recommendation_sequence(&h.items[..p], max_len)?;
            examples.push(MaskedExample {
                context: encoder.encode(&seq)?.into_values(),
                gold: h.items[p],
                candidates: all.clone(),
            });
        }
    }
    let params = ModelParameters::init(kg.num_entities(), kg.num_relations(), encoder.dim(), cfg.init_scale, cfg.temperature, cfg.seed)?;
    train_table(params, examples, cfg)
}

/// Plain SGD over masked examples with per-epoch seeded shuffling.
fn train_table(mut params: ModelParameters, examples: Vec<MaskedExample>, cfg: &TrainerConfig) -> Result<ModelParameters> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.effective_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(linalg::derive_seed(cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let limit = cfg.max_batches().unwrap_or(usize::MAX);
        for chunk in order.chunks(cfg.batch_size).take(limit) {
            let batch: Vec<MaskedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = training::masked_entity_step(&params, &batch, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}")));
            }
            training::apply_masked_gradients(&mut params, &grads, cfg.learning_rate);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity: EntityId,
    /// Token range `[start, end)` within the cloze.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeQuery {
    tokens: Vec<Token>,
    mention: Option<Mention>,
}

impl ClozeQuery {
    pub fn new(tokens: Vec<Token>, mention: Option<Mention>) -> Result<Self> {
        let masks = tokens.iter().filter(|t| t.is(SpecialToken::Mask)).count();
        if masks != 1 {
            return Err(Error::InvalidArgument(format!("cloze needs exactly one [MASK], found {masks}")));
        }
        if let Some(m) = mention {
            if m.start >= m.end || m.end > tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "mention span {}..{} outside {} tokens",
                    m.start,
                    m.end,
                    tokens.len()
                )));
            }
        }
        Ok(Self { tokens, mention })
    }

    pub fn parse(text: &str, mention: Option<Mention>, cfg: &crate::serialize::SerializeConfig) -> Result<Self> {
        Self::new(parse_marked_text(text, cfg), mention)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn mention(&self) -> Option<Mention> {
        self.mention
    }

    pub fn sequence(&self) -> Result<TokenSequence> {
        TokenSequence::new(self.tokens.clone(), self.tokens.len())
    }
}

/// Token-output head plus the entity table used for fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub vocabulary: Vec<String>,
    /// Row `i` scores `vocabulary[i]`.
    pub token_table: Matrix,
    pub entity_table: Matrix,
    /// Fusion strength; zero turns augmentation off.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub base: Vec<(String, f64)>,
    pub augmented: Option<Vec<(String, f64)>>,
}

impl ProbeModel {
    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == token)
    }

    /// `normalize(base + λ·entity_table[mention])`
    pub fn augment(&self, base: &[f64], entity: EntityId) -> Result<Vec<f64>> {
        if entity.0 >= self.entity_table.rows() {
            return Err(Error::UnknownEntity(entity.to_string()));
        }
        let mut v = base.to_vec();
        linalg::axpy(self.lambda, self.entity_table.row(entity.0), &mut v);
        let n = linalg::norm(&v);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }

    fn token_scores(&self, context: &[f64]) -> Vec<f64> {
        scoring::log_softmax(&self.token_table.matvec(context))
    }

    /// Base context and, with a mention, the augmented one.
    pub fn contexts(&self, encoder: &dyn Encoder, query: &ClozeQuery) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let base = encoder.encode(&query.sequence()?)?.into_values();
        if base.len() != self.token_table.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.token_table.cols(),
                actual: base.len(),
            });
        }
        let aug = query.mention.map(|m| self.augment(&base, m.entity)).transpose()?;
        Ok((base, aug))
    }
}

pub fn probe_fact(model: &ProbeModel, encoder: &dyn Encoder, query: &ClozeQuery, top_n: usize) -> Result<ProbeResult> {
    let (base, aug) = model.contexts(encoder, query)?;
    let to_tokens = |ctx: &[f64]| -> Vec<(String, f64)> {
        top_indices(&model.token_scores(ctx), &BTreeSet::new(), top_n)
            .into_iter()
            .map(|(i, s)| (model.vocabulary[i].clone(), s))
            .collect()
    };
    Ok(ProbeResult {
        base: to_tokens(&base),
        augmented: aug.as_deref().map(to_tokens),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub base: MetricsReport,
    /// Queries without a mention use their base rank here.
    pub augmented: MetricsReport,
}

pub fn probe_eval(model: &ProbeModel, encoder: &dyn Encoder, items: &[ProbeItem]) -> Result<ProbeReport> {
    let mut base_ranks = Vec::with_capacity(items.len());
    let mut aug_ranks = Vec::with_capacity(items.len());
    let none = BTreeSet::new();
    for it in items {
        let gold = model
            .token_index(&it.gold)
            .ok_or_else(|| Error::OutOfVocabulary(it.gold.clone()))?;
        let (base, aug) = model.contexts(encoder, &it.query)?;
        let b = eval::rank_gold(&model.token_scores(&base), EntityId(gold), &none)?;
        let a = match aug {
            Some(ctx) => eval::rank_gold(&model.token_scores(&ctx), EntityId(gold), &none)?,
            None => b,
        };
        base_ranks.push(b);
        aug_ranks.push(a);
    }
    Ok(ProbeReport {
        base: eval::compute_metrics(&base_ranks)?,
        augmented: eval::compute_metrics(&aug_ranks)?,
    })
}

/// Learns the token table from base (non-augmented) contexts.
pub fn train_token_table(
    encoder: &dyn Encoder,
    vocabulary: &[String],
    items: &[ProbeItem],
    cfg: &TrainerConfig,
) -> Result<Matrix> {
    let all: Vec<EntityId> = (0..vocabulary.len()).map(EntityId).collect();
    let examples = items
        .iter()
        .map(|it| {
            let gold = vocabulary
                .iter()
                .position(|v| *v == it.gold)
                .ok_or_else(|| Error::OutOfVocabulary(it.gold.clone()))?;
            Ok(MaskedExample {
                context: encoder.encode(&it.query.sequence()?)?.into_values(),
                gold: EntityId(gold),
                candidates: all.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParameters::init(vocabulary.len(), 0, encoder.dim(), cfg.init_scale, cfg.temperature, cfg.seed)?;
    Ok(train_table(params, examples, cfg)?.entity_table)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaItem {
    pub question: String,
    pub gold: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeItem {
    pub query: ClozeQuery,
    pub gold: String,
}

fn tsv_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').map(str::to_string).collect()))
        .collect())
}

/// `question\tgold_entity_raw_id`
pub fn read_qa(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<QaItem>> {
    tsv_lines(path)?
        .into_iter()
        .map(|(line, cols)| match cols.as_slice() {
            [q, gold] => Ok(QaItem {
                question: q.clone(),
                gold: kg.entity_by_raw(gold).map_err(|e| Error::malformed(path, line, e.to_string()))?,
            }),
            _ => Err(Error::malformed(path, line, format!("expected 2 columns, found {}", cols.len()))),
        })
        .collect()
}

/// `user_id\titem1,item2,...` in chronological order.
pub fn read_interactions(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<InteractionHistory>> {
    tsv_lines(path)?
        .into_iter()
        .map(|(line, cols)| {
            let [user, items] = cols.as_slice() else {
                return Err(Error::malformed(path, line, format!("expected 2 columns, found {}", cols.len())));
            };
            let items = items
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|raw| kg.entity_by_raw(raw).map_err(|e| Error::malformed(path, line, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if items.is_empty() {
                return Err(Error::malformed(path, line, "empty interaction history"));
            }
            Ok(InteractionHistory {
                user: user.clone(),
                items,
            })
        })
        .collect()
}

/// `cloze_with_[MASK]\tgold_token[\tmention_raw_id:start:end]`
pub fn read_probes(path: &Path, kg: &KnowledgeGraph, cfg: &crate::serialize::SerializeConfig) -> Result<Vec<ProbeItem>> {
    tsv_lines(path)?
        .into_iter()
        .map(|(line, cols)| {
            let bad = |m: String| Error::malformed(path, line, m);
            let (text, gold, mention) = match cols.as_slice() {
                [t, g] => (t, g, None),
                [t, g, m] => (t, g, Some(m)),
                _ => return Err(bad(format!("expected 2 or 3 columns, found {}", cols.len()))),
            };
            let mention = mention
                .map(|m| -> Result<Mention> {
                    let parts: Vec<&str> = m.rsplitn(3, ':').collect();
                    let [end, start, raw] = parts.as_slice() else {
                        return Err(bad(format!("mention {m:?} is not raw_id:start:end")));
                    };
                    Ok(Mention {
                        entity: kg.entity_by_raw(raw).map_err(|e| bad(e.to_string()))?,
                        start: start.parse().map_err(|_| bad(format!("bad mention start {start:?}")))?,
                        end: end.parse().map_err(|_| bad(format!("bad mention end {end:?}")))?,
                    })
                })
                .transpose()?;
            let query = ClozeQuery::parse(text, mention, cfg).map_err(|e| bad(e.to_string()))?;
            let gold = crate::serialize::tokenize(gold, cfg).join(" ");
            Ok(ProbeItem { query, gold })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EmbeddingVector, HashEncoder};
    use crate::graph::TextRecord;
    use crate::serialize::SerializeConfig;
    use std::sync::Mutex;

    fn kg() -> KnowledgeGraph {
        let ents = ["apple", "banana", "red", "yellow", "tree"]
            .iter()
            .enumerate()
            .map(|(i, n)| TextRecord::new(format!("e{i}"), *n, ""))
            .collect();
        let rels = vec![TextRecord::new("r0", "has_color", ""), TextRecord::new("r1", "grows_on", "")];
        let t = |h: &str, r: &str, t: &str| (h.to_string(), r.to_string(), t.to_string());
        let train = vec![t("e0", "r0", "e2"), t("e1", "r0", "e3"), t("e0", "r1", "e4"), t("e1", "r1", "e4")];
        KnowledgeGraph::from_records(ents, rels, &train, &[], &[]).unwrap()
    }

    /// Records every sequence it encodes.
    struct Spy {
        inner: HashEncoder,
        seen: Mutex<Vec<String>>,
    }

    impl Encoder for Spy {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
            self.seen.lock().unwrap().push(seq.to_string());
            self.inner.encode(seq)
        }
    }

    #[test]
    fn kgc_head_direction_uses_reverse() {
        let kg = kg();
        let enc = Spy {
            inner: HashEncoder::new(16, 0).unwrap(),
            seen: Mutex::new(vec![]),
        };
        let ser = SerializeConfig::default();
        let params = ModelParameters::init(5, 2, 16, 0.1, 0.05, 0).unwrap();
        let model = MaskedEntityModel::new(&kg, &params, &enc, &ser);
        let out = kgc_predict(&model, EntityId(2), RelationId(0), Direction::PredictHead, None, 1).unwrap();
        assert_eq!(out.len(), 1);
        let seen = enc.seen.lock().unwrap();
        assert!(seen[0].starts_with("[CLS] [REVERSE] red [E2]"), "{}", seen[0]);
    }

    #[test]
    fn filter_keeps_requested_gold() {
        let kg = kg();
        let enc = HashEncoder::new(16, 0).unwrap();
        let ser = SerializeConfig::default();
        let params = ModelParameters::init(5, 2, 16, 0.1, 0.05, 0).unwrap();
        let model = MaskedEntityModel::new(&kg, &params, &enc, &ser);
        let filter = FilterIndex::build(&kg);
        // (tree, grows_on, ?) heads are apple and banana
        let out = kgc_predict(&model, EntityId(4), RelationId(1), Direction::PredictHead, Some((&filter, Some(EntityId(0)))), 5).unwrap();
        let ids: Vec<usize> = out.iter().map(|r| r.entity.0).collect();
        assert!(ids.contains(&0) && !ids.contains(&1));
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn qa_matches_kgc_on_identical_input() {
        let kg = kg();
        let enc = HashEncoder::new(32, 1).unwrap();
        let ser = SerializeConfig::default();
        let params = ModelParameters::init(5, 2, 32, 0.5, 0.05, 3).unwrap();
        let model = MaskedEntityModel::new(&kg, &params, &enc, &ser);
        let seq = model.query_sequence(EntityId(0), RelationId(0), Direction::PredictTail).unwrap();
        let rendered = seq.to_string();
        let inner = rendered.strip_prefix("[CLS] ").unwrap().strip_suffix(" [SEP] [MASK] [SEP]").unwrap();
        assert_eq!(qa_sequence(inner, &model).unwrap(), seq);
        let a = qa_answer(&model, inner, 5).unwrap();
        let b = kgc_predict(&model, EntityId(0), RelationId(0), Direction::PredictTail, None, 5).unwrap();
        assert_eq!(a, b);
        assert!(qa_answer(&model, "   ", 1).is_err());
    }

    #[test]
    fn recommendation_truncates_and_excludes_history() {
        let seq = recommendation_sequence(&(0..10).map(EntityId).collect::<Vec<_>>(), 8).unwrap();
        assert_eq!(seq.to_string(), "[CLS] [E5] [E6] [E7] [E8] [E9] [MASK] [SEP]");
        assert!(recommendation_sequence(&[], 8).is_err());

        let kg = kg();
        let enc = HashEncoder::new(32, 0).unwrap();
        let ser = SerializeConfig::default();
        let h = |items: &[usize]| InteractionHistory {
            user: "u".into(),
            items: items.iter().copied().map(EntityId).collect(),
        };
        // 0 is always followed by 1, and 2 by 3
        let histories = vec![h(&[0, 1]), h(&[2, 3]), h(&[4, 0, 1]), h(&[4, 2, 3])];
        let cfg = TrainerConfig {
            learning_rate: 1.0,
            epochs: 100,
            batch_size: 2,
            label_smoothing: 0.0,
            ..Default::default()
        };
        let params = train_recommender(&kg, &enc, ser.max_len, &histories, &cfg).unwrap();
        let model = MaskedEntityModel::new(&kg, &params, &enc, &ser);
        assert_eq!(recommend_next(&model, &h(&[0]), 1).unwrap()[0].entity, EntityId(1));
        assert_eq!(recommend_next(&model, &h(&[2]), 1).unwrap()[0].entity, EntityId(3));
        let out = recommend_next(&model, &h(&[0, 1, 2]), 5).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.entity.0 > 2));
    }

    #[test]
    fn cloze_needs_one_mask() {
        let cfg = SerializeConfig::default();
        assert!(ClozeQuery::parse("paris is in [MASK] .", None, &cfg).is_ok());
        assert!(ClozeQuery::parse("paris is in france .", None, &cfg).is_err());
        assert!(ClozeQuery::parse("[MASK] [MASK]", None, &cfg).is_err());
        let m = Mention {
            entity: EntityId(0),
            start: 0,
            end: 9,
        };
        assert!(ClozeQuery::parse("paris [MASK]", Some(m), &cfg).is_err());
    }

    /// Every query has the same uninformative text, so the base model can
    /// rank at most one gold first. Token rows equal the mentioned entity
    /// rows, so fusion points straight at the gold.
    #[test]
    fn augmentation_helps_on_entity_aligned_tokens() {
        let cfg = SerializeConfig::default();
        let enc = HashEncoder::new(64, 0).unwrap();
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entities = Matrix::random_normal(n, 64, 1.0, &mut rng);
        for i in 0..n {
            let norm = linalg::norm(entities.row(i));
            entities.row_mut(i).iter_mut().for_each(|x| *x /= norm);
        }
        let vocabulary: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
        let items: Vec<ProbeItem> = (0..n)
            .map(|i| ProbeItem {
                query: ClozeQuery::parse(
                    "it is [MASK] .",
                    Some(Mention {
                        entity: EntityId(i),
                        start: 0,
                        end: 1,
                    }),
                    &cfg,
                )
                .unwrap(),
                gold: vocabulary[i].clone(),
            })
            .collect();
        let mut model = ProbeModel {
            vocabulary,
            token_table: entities.clone(),
            entity_table: entities,
            lambda: 0.0,
        };
        let off = probe_eval(&model, &enc, &items).unwrap();
        assert_eq!(off.base, off.augmented);
        model.lambda = 1.0;
        let on = probe_eval(&model, &enc, &items).unwrap();
        assert!(on.base.hits1 <= 1.0 / n as f64 + 1e-12);
        assert_eq!(on.augmented.hits1, 1.0);
        let r = probe_fact(&model, &enc, &items[3].query, 2).unwrap();
        assert_eq!(r.augmented.unwrap()[0].0, "tok3");
    }

    #[test]
    fn probe_file_parsing() {
        let kg = kg();
        let cfg = SerializeConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe.tsv");
        fs::write(&p, "apple is [MASK] .\tRed\te0:0:1\nthe [MASK] tree\ttall\n").unwrap();
        let items = read_probes(&p, &kg, &cfg).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].gold, "red");
        assert_eq!(items[0].query.mention().unwrap().entity, EntityId(0));
        assert!(items[1].query.mention().is_none());
        fs::write(&p, "no mask here\tx\n").unwrap();
        let err = read_probes(&p, &kg, &cfg).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 1, .. }));
    }
}
