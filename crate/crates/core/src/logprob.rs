//! Next-token log-probability providers used for generation scoring.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub trait LogProbProvider: Send + Sync {
    fn vocabulary(&self) -> &[String];

    fn token_index(&self, token: &str) -> Option<usize>;

    /// `log p(next = v | prefix)` for every vocabulary entry `v`, in
    /// vocabulary order. Exponentiated values sum to one.
    fn next_token_logprobs(&self, prefix: &[String]) -> Vec<f64>;

    fn logprob(&self, prefix: &[String], token: &str) -> Result<f64> {
        let i = self.token_index(token).ok_or_else(|| Error::OutOfVocabulary(token.to_string()))?;
        Ok(self.next_token_logprobs(prefix)[i])
    }
}

#[derive(Debug, Clone)]
struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut out = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if !out.index.contains_key(&t) {
                out.index.insert(t.clone(), out.tokens.len());
                out.tokens.push(t);
            }
        }
        if out.tokens.is_empty() {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct UniformLogProbs {
    vocab: Vocab,
}

impl UniformLogProbs {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        Ok(Self { vocab: Vocab::new(tokens)? })
    }
}

impl LogProbProvider for UniformLogProbs {
    fn vocabulary(&self) -> &[String] {
        &self.vocab.tokens
    }

    fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.index.get(token).copied()
    }

    fn next_token_logprobs(&self, _prefix: &[String]) -> Vec<f64> {
        let n = self.vocab.tokens.len();
        vec![-(n as f64).ln(); n]
    }
}

/// Add-alpha smoothed bigram model conditioned on the last prefix token.
/// A prefix ending in an unseen token falls back to smoothed unigrams.
#[derive(Debug, Clone)]
pub struct BigramLogProbs {
    vocab: Vocab,
    alpha: f64,
    unigram: Vec<f64>,
    unigram_total: f64,
    bigram: HashMap<String, (HashMap<usize, f64>, f64)>,
}

impl BigramLogProbs {
    /// Counts transitions in `corpus`. Only tokens in `vocabulary` can be
    /// predicted; any token may act as conditioning context.
    pub fn fit<'a>(
        vocabulary: impl IntoIterator<Item = String>,
        corpus: impl IntoIterator<Item = &'a [String]>,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let vocab = Vocab::new(vocabulary)?;
        let mut unigram = vec![0.0; vocab.tokens.len()];
        let mut unigram_total = 0.0;
        let mut bigram: HashMap<String, (HashMap<usize, f64>, f64)> = HashMap::new();
        for seq in corpus {
            for (i, tok) in seq.iter().enumerate() {
                let Some(&j) = vocab.index.get(tok) else { continue };
                unigram[j] += 1.0;
                unigram_total += 1.0;
                if i > 0 {
                    let entry = bigram.entry(seq[i - 1].clone()).or_default();
                    *entry.0.entry(j).or_default() += 1.0;
                    entry.1 += 1.0;
                }
            }
        }
        Ok(Self {
            vocab,
            alpha,
            unigram,
            unigram_total,
            bigram,
        })
    }
}

impl LogProbProvider for BigramLogProbs {
    fn vocabulary(&self) -> &[String] {
        &self.vocab.tokens
    }

    fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.index.get(token).copied()
    }

    fn next_token_logprobs(&self, prefix: &[String]) -> Vec<f64> {
        let v = self.vocab.tokens.len() as f64;
        let smoothed = |count: f64, total: f64| ((count + self.alpha) / (total + self.alpha * v)).ln();
        match prefix.last().and_then(|p| self.bigram.get(p)) {
            Some((counts, total)) => (0..self.vocab.tokens.len())
                .map(|j| smoothed(counts.get(&j).copied().unwrap_or(0.0), *total))
                .collect(),
            None => self.unigram.iter().map(|&c| smoothed(c, self.unigram_total)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn sums_to_one(lp: &dyn LogProbProvider, prefix: &[String]) {
        let total: f64 = lp.next_token_logprobs(prefix).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn uniform_normalized() {
        let lp = UniformLogProbs::new(s(&["a", "b", "c", "d"])).unwrap();
        sums_to_one(&lp, &[]);
        assert!((lp.logprob(&[], "a").unwrap() - 0.25f64.ln()).abs() < 1e-12);
        assert!(lp.logprob(&[], "z").is_err());
    }

    #[test]
    fn bigram_normalized_and_learns_transitions() {
        let corpus = [s(&["x", "a", "b"]), s(&["x", "a", "b"]), s(&["y", "c"])];
        let lp = BigramLogProbs::fit(s(&["a", "b", "c"]), corpus.iter().map(Vec::as_slice), 0.1).unwrap();
        sums_to_one(&lp, &s(&["a"]));
        sums_to_one(&lp, &s(&["unseen"]));
        sums_to_one(&lp, &[]);
        let after_a = lp.next_token_logprobs(&s(&["a"]));
        assert!(after_a[1] > after_a[0] && after_a[1] > after_a[2]);
    }
}
