//! Filtered link-prediction evaluation, BLEU-1, and the per-method cost
//! model for text-based KGE approaches.
//!
//! Ties are ranked pessimistically: every candidate scoring exactly as high
//! as the gold counts as ahead of it.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, FilterIndex, KnowledgeGraph, RelationId, Split};
use crate::serialize::Direction;

/// Anything that can score every entity as the answer to a query.
pub trait LinkScorer: Sync {
    /// One score per entity id (higher is better).
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>>;
}

impl<F> LinkScorer for F
where
    F: Fn(EntityId, RelationId, Direction) -> Result<Vec<f64>> + Sync,
{
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        self(known, relation, direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directions {
    Tail,
    Head,
    Both,
}

impl Directions {
    pub fn list(self) -> &'static [Direction] {
        match self {
            Directions::Tail => &[Direction::PredictTail],
            Directions::Head => &[Direction::PredictHead],
            Directions::Both => &[Direction::PredictTail, Direction::PredictHead],
        }
    }
}

impl FromStr for Directions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tail" => Ok(Directions::Tail),
            "head" => Ok(Directions::Head),
            "both" => Ok(Directions::Both),
            other => Err(Error::InvalidArgument(format!("unknown directions {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub known: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub gold: EntityId,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mr: f64,
    pub mrr: f64,
    pub count: usize,
}

/// `1 + #{score > gold} + #{score == gold, not gold}`, after dropping
/// `filtered` candidates (the gold itself is never dropped).
pub fn rank_gold(scores: &[f64], gold: EntityId, filtered: &BTreeSet<EntityId>) -> Result<usize> {
    let g = *scores
        .get(gold.0)
        .ok_or_else(|| Error::InvalidArgument(format!("gold {gold} has no score")))?;
    if g.is_nan() {
        return Err(Error::NonFinite(format!("score of gold {gold}")));
    }
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == gold.0 || filtered.contains(&EntityId(i)) {
            continue;
        }
        if s >= g || s.is_nan() {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn compute_metrics(ranks: &[usize]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(MetricsReport {
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        count: ranks.len(),
    })
}

/// Ranks the gold of every `split` triple in each requested direction
/// against all entities, filtering other known answers. Queries run in
/// parallel; results come back in split order, tail before head.
pub fn link_prediction_eval(
    scorer: &dyn LinkScorer,
    kg: &KnowledgeGraph,
    split: Split,
    filter: &FilterIndex,
    directions: Directions,
) -> Result<(MetricsReport, Vec<RankResult>)> {
    let queries: Vec<_> = kg
        .split(split)
        .iter()
        .flat_map(|t| {
            directions.list().iter().map(move |&d| match d {
                Direction::PredictTail => (t.head, t.relation, d, t.tail),
                Direction::PredictHead => (t.tail, t.relation, d, t.head),
            })
        })
        .collect();
    let empty = BTreeSet::new();
    let results = queries
        .par_iter()
        .map(|&(known, relation, direction, gold)| {
            let scores = scorer.score_candidates(known, relation, direction)?;
            if scores.len() != kg.num_entities() {
                return Err(Error::DimensionMismatch {
                    expected: kg.num_entities(),
                    actual: scores.len(),
                });
            }
            let filtered = filter.known_answers(known, relation, direction).unwrap_or(&empty);
            Ok(RankResult {
                known,
                relation,
                direction,
                gold,
                rank: rank_gold(&scores, gold, filtered)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    Ok((compute_metrics(&ranks)?, results))
}

/// Per-query TSV: `h\tr\tdirection\tgold\trank` with raw ids. For head
/// queries `h` is the known tail.
pub fn ranks_tsv(kg: &KnowledgeGraph, results: &[RankResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            kg.entity(r.known)?.raw_id,
            kg.relation(r.relation)?.raw_id,
            r.direction.as_str(),
            kg.entity(r.gold)?.raw_id,
            r.rank
        ));
    }
    Ok(out)
}

/// Clipped unigram precision times the brevity penalty, with the closest
/// reference length (shorter wins ties).
pub fn bleu1<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    fn count<S: AsRef<str>>(toks: &[S]) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for t in toks {
            *m.entry(t.as_ref()).or_insert(0) += 1;
        }
        m
    }
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in references {
        for (tok, c) in count(r) {
            let e = max_ref.entry(tok).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped: usize = count(candidate)
        .into_iter()
        .map(|(tok, c)| c.min(max_ref.get(tok).copied().unwrap_or(0)))
        .sum();
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - candidate.len() as i64).abs(), len))
        .unwrap_or(0) as f64;
    let bp = (1.0 - r / c).min(0.0).exp();
    bp * clipped as f64 / c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMethod {
    KgBert,
    StAR,
    SimKgc,
    KnnKge,
    Kgt5,
    GenKgc,
}

impl CostMethod {
    pub const ALL: [CostMethod; 6] = [
        CostMethod::KgBert,
        CostMethod::StAR,
        CostMethod::SimKgc,
        CostMethod::KnnKge,
        CostMethod::Kgt5,
        CostMethod::GenKgc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::KgBert => "KGBERT",
            CostMethod::StAR => "StAR",
            CostMethod::SimKgc => "SimKGC",
            CostMethod::KnnKge => "kNN-KGE",
            CostMethod::Kgt5 => "KGT5",
            CostMethod::GenKgc => "GenKGC",
        }
    }

    /// Asymptotic cost in terms of description length L, entity count E
    /// and relation count R.
    pub fn expression(self) -> &'static str {
        match self {
            CostMethod::KgBert => "O(|L|^2|E|^2|R|)",
            CostMethod::StAR | CostMethod::SimKgc => "O(|L/2|^2|E|(1+|R|))",
            CostMethod::KnnKge => "O(|L|^2|E||R|)",
            CostMethod::Kgt5 | CostMethod::GenKgc => "O(|L/2|^3|E||R|)",
        }
    }

    pub fn evaluate(self, l: f64, e: f64, r: f64) -> f64 {
        let half = l / 2.0;
        match self {
            CostMethod::KgBert => l * l * e * e * r,
            CostMethod::StAR | CostMethod::SimKgc => half * half * e * (1.0 + r),
            CostMethod::KnnKge => l * l * e * r,
            CostMethod::Kgt5 | CostMethod::GenKgc => half * half * half * e * r,
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        CostMethod::ALL
            .into_iter()
            .find(|m| m.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub l: f64,
    pub e: f64,
    pub r: f64,
    pub method: CostMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub expression: String,
    pub value: f64,
}

pub fn cost_model(input: &CostModelInput) -> Result<CostRow> {
    for (name, v) in [("L", input.l), ("E", input.e), ("R", input.r)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(CostRow {
        method: input.method.name().to_string(),
        expression: input.method.expression().to_string(),
        value: input.method.evaluate(input.l, input.e, input.r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> BTreeSet<EntityId> {
        ids.iter().map(|&i| EntityId(i)).collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_gold(&[0.9, 0.5, 0.1], EntityId(0), &set(&[])).unwrap(), 1);
        assert_eq!(rank_gold(&[0.5, 0.5, 0.5, 0.1], EntityId(0), &set(&[])).unwrap(), 3);
        assert_eq!(rank_gold(&[0.6, 0.9, 0.5], EntityId(0), &set(&[1])).unwrap(), 1);
        // gold listed in its own filter set is still ranked
        assert_eq!(rank_gold(&[0.6, 0.9], EntityId(0), &set(&[0])).unwrap(), 2);
        assert!(rank_gold(&[0.1], EntityId(3), &set(&[])).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1, 2, 100]).unwrap();
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.hits3 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.hits10 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mr - 103.0 / 3.0).abs() < 1e-12);
        assert!((m.mrr - 1.51 / 3.0).abs() < 1e-12);
        let m = compute_metrics(&[1, 1]).unwrap();
        assert_eq!((m.hits1, m.hits10, m.mr, m.mrr), (1.0, 1.0, 1.0, 1.0));
        let m = compute_metrics(&[10]).unwrap();
        assert_eq!((m.hits10, m.hits3, m.mrr), (1.0, 0.0, 0.1));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn bleu_examples() {
        fn t(s: &str) -> Vec<&str> {
            s.split_whitespace().collect()
        }
        assert_eq!(bleu1(&t("a b c"), &[t("a b c")]), 1.0);
        assert!((bleu1(&t("a b c"), &[t("a b d")]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu1::<&str>(&[], &[t("a")]), 0.0);
        // clipping: "the the the" vs "the cat" → 1/3, BP 1 (c > r)
        assert!((bleu1(&t("the the the"), &[t("the cat")]) - 1.0 / 3.0).abs() < 1e-12);
        // brevity penalty: c=1, r=2
        assert!((bleu1(&t("a"), &[t("a b")]) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn cost_rows() {
        let run = |m, l, e, r| cost_model(&CostModelInput { l, e, r, method: m }).unwrap().value;
        assert_eq!(run(CostMethod::KgBert, 2.0, 3.0, 5.0), 180.0);
        assert_eq!(run(CostMethod::SimKgc, 2.0, 3.0, 5.0), 18.0);
        assert_eq!(run(CostMethod::Kgt5, 4.0, 2.0, 3.0), 48.0);
        assert_eq!("knn-kge".parse::<CostMethod>().unwrap(), CostMethod::KnnKge);
        assert_eq!("GenKGC".parse::<CostMethod>().unwrap(), CostMethod::GenKgc);
        assert!("transe".parse::<CostMethod>().is_err());
        assert!(cost_model(&CostModelInput { l: 0.0, e: 1.0, r: 1.0, method: CostMethod::StAR }).is_err());
    }
}
