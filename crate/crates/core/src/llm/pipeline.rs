//! Retrieval, prompting, completion and answer parsing for LLM-based
//! tail prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    normalize_surface, EntityId, FilterIndex, KnowledgeGraph, RelationId, Split, Triple,
};

use super::bm25::Bm25Index;
use super::client::{ChatModel, MockChat};
use super::prompt::{self, Demonstration, PromptTemplate};

/// BM25 over verbalized train triples; document `i` is train triple `i`.
#[derive(Debug, Clone)]
pub struct TripleRetriever {
    index: Bm25Index,
    docs: Vec<Triple>,
}

impl TripleRetriever {
    pub fn build(kg: &KnowledgeGraph) -> Result<Self> {
        let docs = kg.split(Split::Train).to_vec();
        let texts = docs
            .iter()
            .map(|t| kg.verbalize_triple(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            index: Bm25Index::build(&texts),
            docs,
        })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    pub fn docs(&self) -> &[Triple] {
        &self.docs
    }

    /// All matching train triples for `‹head name› ‹relation name›`, best
    /// first.
    pub fn retrieve(
        &self,
        kg: &KnowledgeGraph,
        head: EntityId,
        relation: RelationId,
    ) -> Result<Vec<Triple>> {
        let q = format!(
            "{} {}",
            kg.entity(head)?.name,
            kg.relation(relation)?.display_name()
        );
        Ok(self
            .index
            .topn(&q, self.docs.len())
            .into_iter()
            .map(|(d, _)| self.docs[d])
            .collect())
    }
}

/// Tail names of the retrieved triples in retrieval order, deduplicated,
/// at most `n`.
pub fn select_candidates(
    kg: &KnowledgeGraph,
    retriever: &TripleRetriever,
    head: EntityId,
    relation: RelationId,
    n: usize,
) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in retriever.retrieve(kg, head, relation)? {
        if out.len() >= n {
            break;
        }
        let name = kg.entity(t.tail)?.name.clone();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    Ok(out)
}

/// The `n` best-matching train triples as worked examples.
pub fn select_demonstrations(
    kg: &KnowledgeGraph,
    retriever: &TripleRetriever,
    head: EntityId,
    relation: RelationId,
    n: usize,
    with_rationale: bool,
) -> Result<Vec<Demonstration>> {
    retriever
        .retrieve(kg, head, relation)?
        .into_iter()
        .take(n)
        .map(|t| {
            let h = &kg.entity(t.head)?.name;
            let r = kg.relation(t.relation)?.display_name();
            let a = &kg.entity(t.tail)?.name;
            Ok(Demonstration {
                question: prompt::query_text(h, &r),
                answer: a.clone(),
                rationale: with_rationale.then(|| prompt::rationale_text(h, &r, a)),
            })
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    normalize_surface(&s.to_lowercase())
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether `needle` occurs in `hay` as a run of whole words.
fn contains_words(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn strip_punct(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Index of the candidate a free-text answer refers to.
///
/// First pass: candidates appearing verbatim (case-insensitive, whole
/// words, surrounding punctuation ignored); the longest wins. Second pass:
/// the highest token-set Jaccard overlap, at least 0.5. Ties go to the
/// earlier candidate.
pub fn parse_prediction(response: &str, candidates: &[String]) -> Option<usize> {
    let resp: Vec<String> = words(response)
        .iter()
        .map(|w| strip_punct(w).to_string())
        .filter(|w| !w.is_empty())
        .collect();
    let cands: Vec<Vec<String>> = candidates
        .iter()
        .map(|c| {
            words(c)
                .iter()
                .map(|w| strip_punct(w).to_string())
                .filter(|w| !w.is_empty())
                .collect()
        })
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, c) in cands.iter().enumerate() {
        if contains_words(&resp, c) && best.is_none_or(|(_, len)| c.len() > len) {
            best = Some((i, c.len()));
        }
    }
    if let Some((i, _)) = best {
        return Some(i);
    }
    let resp_set: BTreeSet<&String> = resp.iter().collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let c_set: BTreeSet<&String> = c.iter().collect();
        let union = resp_set.union(&c_set).count();
        if union == 0 {
            continue;
        }
        let j = resp_set.intersection(&c_set).count() as f64 / union as f64;
        if j >= 0.5 && best.is_none_or(|(_, bj)| j > bj) {
            best = Some((i, j));
        }
    }
    best.map(|(i, _)| i)
}

/// `n` test triples split evenly across the relations that occur in the
/// test split. The remainder goes one each to relations in id order;
/// quota a relation cannot fill moves to the next relations in id order.
/// Output is grouped by relation id, split order within a relation.
pub fn stratified_sample(
    kg: &KnowledgeGraph,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Vec<Triple>> {
    let triples = kg.split(split);
    if n > triples.len() {
        return Err(Error::InvalidArgument(format!(
            "sample size {n} exceeds the {} triples in the {split:?} split",
            triples.len()
        )));
    }
    let mut groups: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
    for t in triples {
        groups.entry(t.relation).or_default().push(*t);
    }
    let quotas = stratified_quotas(&groups.values().map(Vec::len).collect::<Vec<_>>(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (group, quota) in groups.values().zip(quotas) {
        let mut picked = rand::seq::index::sample(&mut rng, group.len(), quota).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| group[i]));
    }
    Ok(out)
}

/// Per-group sample counts for the rule in [`stratified_sample`].
pub fn stratified_quotas(sizes: &[usize], n: usize) -> Vec<usize> {
    let mut quotas = vec![0; sizes.len()];
    let mut left = n.min(sizes.iter().sum());
    while left > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| quotas[i] < sizes[i]).collect();
        let share = left / open.len();
        let mut extra = left % open.len();
        for i in open {
            let want = share + usize::from(extra > 0);
            let take = want.min(sizes[i] - quotas[i]);
            if extra > 0 && take == want {
                extra -= 1;
            }
            quotas[i] += take;
            left -= take;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEvalConfig {
    pub sample_size: usize,
    pub num_candidates: usize,
    pub num_demonstrations: usize,
    pub with_rationale: bool,
    pub seed: u64,
    pub template: PromptTemplate,
}

impl Default for LlmEvalConfig {
    fn default() -> Self {
        Self {
            sample_size: 20,
            num_candidates: 100,
            num_demonstrations: 5,
            with_rationale: false,
            seed: 0,
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub h: String,
    pub r: String,
    pub gold: String,
    pub prediction: Option<String>,
    pub raw_response: String,
    pub hit: bool,
    /// `1-1` when the query has one known answer, `1-n` otherwise.
    pub cardinality: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEvalReport {
    pub hits1: f64,
    pub count: usize,
    pub retries: u32,
}

fn first_entity_named(kg: &KnowledgeGraph, name: &str) -> Option<EntityId> {
    kg.entities().iter().find(|e| e.name == name).map(|e| e.id)
}

/// Prompt for one test triple; the gold never enters the prompt except if
/// retrieval surfaces it as a train tail.
pub fn prompt_for(
    kg: &KnowledgeGraph,
    retriever: &TripleRetriever,
    t: &Triple,
    cfg: &LlmEvalConfig,
) -> Result<prompt::Prompt> {
    let mut candidates = select_candidates(kg, retriever, t.head, t.relation, cfg.num_candidates)?;
    if candidates.is_empty() {
        // nothing retrieved: fall back to every entity name
        let mut seen = BTreeSet::new();
        candidates = kg
            .entities()
            .iter()
            .filter(|e| seen.insert(e.name.clone()))
            .take(cfg.num_candidates.max(1))
            .map(|e| e.name.clone())
            .collect();
    }
    let demos = select_demonstrations(
        kg,
        retriever,
        t.head,
        t.relation,
        cfg.num_demonstrations,
        cfg.with_rationale,
    )?;
    let test = prompt::query_text(
        &kg.entity(t.head)?.name,
        &kg.relation(t.relation)?.display_name(),
    );
    prompt::build_prompt(&cfg.template, &candidates, &demos, &test)
}

/// Runs the sampled test queries one by one. Each transcript line is
/// written and flushed before the next request, so an aborted run keeps
/// everything completed so far.
pub fn evaluate_llm_kgc(
    kg: &KnowledgeGraph,
    client: &dyn ChatModel,
    cfg: &LlmEvalConfig,
    mut transcript: Option<&mut dyn Write>,
) -> Result<(LlmEvalReport, Vec<TranscriptLine>)> {
    if cfg.sample_size == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let queries = stratified_sample(kg, Split::Test, cfg.sample_size, cfg.seed)?;
    let retriever = TripleRetriever::build(kg)?;
    let filter = FilterIndex::build(kg);
    let all_names: Vec<String> = kg.entities().iter().map(|e| e.name.clone()).collect();
    let mut lines = Vec::with_capacity(queries.len());
    let mut retries = 0;
    for t in &queries {
        let p = prompt_for(kg, &retriever, t, cfg)?;
        let completion = client.complete(&p.rendered)?;
        retries += completion.retries;
        let predicted = parse_prediction(&completion.text, &p.candidates)
            .map(|i| p.candidates[i].as_str())
            .or_else(|| {
                parse_prediction(&completion.text, &all_names).map(|i| all_names[i].as_str())
            })
            .and_then(|name| first_entity_named(kg, name));
        let answers = filter
            .true_tails(t.head, t.relation)
            .map_or(1, BTreeSet::len);
        let line = TranscriptLine {
            h: kg.entity(t.head)?.raw_id.clone(),
            r: kg.relation(t.relation)?.raw_id.clone(),
            gold: kg.entity(t.tail)?.raw_id.clone(),
            prediction: predicted
                .map(|id| kg.entity(id).map(|e| e.raw_id.clone()))
                .transpose()?,
            raw_response: completion.text,
            hit: predicted == Some(t.tail),
            cardinality: if answers > 1 { "1-n" } else { "1-1" }.to_string(),
        };
        if let Some(w) = transcript.as_mut() {
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::Transport(format!("transcript write failed: {e}")))?;
        }
        lines.push(line);
    }
    let hits = lines.iter().filter(|l| l.hit).count();
    Ok((
        LlmEvalReport {
            hits1: hits as f64 / lines.len() as f64,
            count: lines.len(),
            retries,
        },
        lines,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    /// Answers with the gold tail name.
    Perfect,
    /// Answers with the name of an entity other than the gold.
    Adversarial,
    /// Answers "I don't know".
    None,
}

impl FromStr for MockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(MockMode::Perfect),
            "adversarial" => Ok(MockMode::Adversarial),
            "none" => Ok(MockMode::None),
            _ => Err(Error::InvalidArgument(format!("unknown mock mode {s:?}"))),
        }
    }
}

/// Mock whose replies are scripted for exactly the queries
/// [`evaluate_llm_kgc`] will ask under `cfg`.
pub fn mock_for(kg: &KnowledgeGraph, cfg: &LlmEvalConfig, mode: MockMode) -> Result<MockChat> {
    if mode == MockMode::None {
        return Ok(MockChat::constant("I don't know"));
    }
    let queries = stratified_sample(kg, Split::Test, cfg.sample_size, cfg.seed)?;
    let mut replies = Vec::with_capacity(queries.len());
    for t in &queries {
        let q = prompt::query_text(
            &kg.entity(t.head)?.name,
            &kg.relation(t.relation)?.display_name(),
        );
        let gold = &kg.entity(t.tail)?.name;
        let answer = match mode {
            MockMode::Perfect => gold.clone(),
            _ => kg
                .entities()
                .iter()
                .map(|e| &e.name)
                .find(|n| parse_prediction(n, std::slice::from_ref(gold)).is_none())
                .ok_or_else(|| {
                    Error::InvalidArgument("no entity name distinct from the gold".into())
                })?
                .clone(),
        };
        replies.push((q, answer));
    }
    Ok(MockChat::scripted(replies))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_examples() {
        let c = names(&["forrest gump", "big"]);
        assert_eq!(parse_prediction("The answer is Forrest Gump.", &c), Some(0));
        assert_eq!(parse_prediction("unknown", &c), None);
        assert_eq!(parse_prediction("gump forrest (1994)", &c), Some(0));
        // longest verbatim match wins
        let c = names(&["apple", "red apple"]);
        assert_eq!(parse_prediction("a red apple", &c), Some(1));
        // whole words only
        assert_eq!(parse_prediction("bigger", &names(&["big"])), None);
    }

    #[test]
    fn quotas() {
        assert_eq!(stratified_quotas(&[5, 5, 5], 6), vec![2, 2, 2]);
        assert_eq!(stratified_quotas(&[5, 5, 5], 7), vec![3, 2, 2]);
        assert_eq!(stratified_quotas(&[1, 5, 5], 6), vec![1, 3, 2]);
        assert_eq!(stratified_quotas(&[1, 1, 9], 6), vec![1, 1, 4]);
        assert_eq!(stratified_quotas(&[2, 2], 4), vec![2, 2]);
        assert_eq!(stratified_quotas(&[], 0), Vec::<usize>::new());
    }
}
