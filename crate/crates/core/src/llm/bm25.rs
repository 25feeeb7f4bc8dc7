//! Okapi BM25 over whitespace-split, lowercased text.

use std::collections::HashMap;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

pub fn bm25_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_terms: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    df: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        Self::with_params(corpus, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params<S: AsRef<str>>(corpus: &[S], k1: f64, b: f64) -> Self {
        let mut doc_terms = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            let toks = bm25_tokens(doc.as_ref());
            doc_lens.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            doc_terms.push(tf);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            total as f64 / doc_lens.len() as f64
        };
        Self {
            k1,
            b,
            doc_terms,
            doc_lens,
            df,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of one document; repeated query terms count once per
    /// occurrence.
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let Some(terms) = self.doc_terms.get(doc) else {
            return 0.0;
        };
        let norm = if self.avg_len > 0.0 {
            1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_len
        } else {
            1.0
        };
        bm25_tokens(query)
            .iter()
            .filter_map(|q| terms.get(q).map(|&tf| (q, tf as f64)))
            .map(|(q, tf)| self.idf(q) * tf * (self.k1 + 1.0) / (tf + self.k1 * norm))
            .sum()
    }

    /// Up to `n` documents with positive score, best first, ties by id.
    pub fn topn(&self, query: &str, n: usize) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = (0..self.len())
            .map(|d| (d, self.score(query, d)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(n);
        hits
    }
}
