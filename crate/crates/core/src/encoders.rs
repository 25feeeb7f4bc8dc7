//! Encoder providers: map a [`TokenSequence`] to a fixed-size vector.
//!
//! These stand in for a frozen pre-trained encoder. [`HashEncoder`] is the
//! deterministic in-process default, [`FileStoreEncoder`] serves vectors
//! precomputed elsewhere, and [`RemoteEncoder`] calls an
//! OpenAI-compatible `/embeddings` endpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};
use crate::http::{self, JsonEndpoint, RateLimiter, RetryPolicy};
use crate::linalg;
use crate::serialize::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|v| v / n).collect())
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Same input, same output.
    fn is_deterministic(&self) -> bool {
        true
    }

    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector>;

    fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<EmbeddingVector>> {
        seqs.iter().map(|s| self.encode(s)).collect()
    }
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        (**self).encode(seq)
    }
    fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<EmbeddingVector>> {
        (**self).encode_batch(seqs)
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        (**self).encode(seq)
    }
    fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<EmbeddingVector>> {
        (**self).encode_batch(seqs)
    }
}

/// Signed feature hashing over rendered tokens, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("hash encoder needs d >= 2, got {dim}")));
        }
        Ok(Self { dim, seed })
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let h = mix64(fnv1a(self.seed, token.as_bytes()));
        let index = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }
}

impl Encoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        let mut v = vec![0.0; self.dim];
        for token in seq.items() {
            let (i, s) = self.bucket(&token.to_string());
            v[i] += s;
        }
        let n = linalg::norm(&v);
        if n == 0.0 {
            // empty input or exact cancellation
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(EmbeddingVector(v))
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed vectors in the plain-text store format:
///
/// ```text
/// d=3
/// key\t0.1 0.2 0.3
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if key.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("store key {key:?} contains a tab or newline")));
        }
        self.vectors.insert(key, values);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<EmbeddingVector> {
        self.vectors
            .get(key)
            .map(|v| EmbeddingVector(v.clone()))
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let dim = loop {
            let Some((i, line)) = lines.next() else {
                return Err(Error::malformed(origin, 1, "missing \"d=<dim>\" header"));
            };
            if line.trim().is_empty() {
                continue;
            }
            break line
                .trim()
                .strip_prefix("d=")
                .and_then(|d| d.parse::<usize>().ok())
                .ok_or_else(|| Error::malformed(origin, i + 1, "expected \"d=<dim>\" header"))?;
        };
        let mut store = Self::new(dim);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(origin, i + 1, "expected \"key<TAB>values\""))?;
            let values = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::malformed(origin, i + 1, e.to_string()))?;
            if values.len() != dim {
                return Err(Error::malformed(
                    origin,
                    i + 1,
                    format!("row has {} values, header says d={dim}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::malformed(origin, i + 1, "non-finite value"));
            }
            store.vectors.insert(key.to_string(), values);
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Floats are written in shortest round-trip form, so save/load is
    /// lossless and byte-stable.
    pub fn to_text(&self) -> String {
        let mut out = format!("d={}\n", self.dim);
        for (k, v) in &self.vectors {
            out.push_str(k);
            out.push('\t');
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Serves stored vectors. Sequences are looked up by their rendered text;
/// entities by raw id.
#[derive(Debug, Clone)]
pub struct FileStoreEncoder {
    store: EmbeddingStore,
}

impl FileStoreEncoder {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(EmbeddingStore::load(path)?))
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn entity_vector(&self, kg: &KnowledgeGraph, id: EntityId) -> Result<EmbeddingVector> {
        self.store.get(&kg.entity(id)?.raw_id)
    }
}

impl Encoder for FileStoreEncoder {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        self.store.get(&seq.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEncoderConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    /// Expected vector size; responses of any other width are rejected.
    pub dim: usize,
    pub batch_size: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub min_request_interval: Duration,
    pub max_in_flight: usize,
}

impl RemoteEncoderConfig {
    pub fn from_env(model: impl Into<String>, dim: usize) -> Result<Self> {
        let (base_url, api_key) = http::credentials_from_env()?;
        Ok(Self {
            base_url,
            api_key,
            model: model.into(),
            dim,
            batch_size: 64,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            min_request_interval: Duration::from_millis(100),
            max_in_flight: 4,
        })
    }
}

/// Client for `POST {base}/embeddings` with
/// `{"input": [...], "model": ...}` → `{"data": [{"index", "embedding"}]}`.
#[derive(Debug)]
pub struct RemoteEncoder {
    endpoint: JsonEndpoint,
    model: String,
    dim: usize,
    batch_size: usize,
    max_in_flight: usize,
}

impl RemoteEncoder {
    pub fn new(cfg: RemoteEncoderConfig) -> Result<Self> {
        if cfg.api_key.trim().is_empty() {
            return Err(Error::Config("remote encoder needs an API key".into()));
        }
        if cfg.batch_size == 0 || cfg.max_in_flight == 0 {
            return Err(Error::Config("batch_size and max_in_flight must be positive".into()));
        }
        let endpoint = JsonEndpoint::new(
            http::join_url(&cfg.base_url, "embeddings"),
            cfg.api_key,
            cfg.timeout,
            cfg.retry,
            RateLimiter::new(cfg.min_request_interval),
        )?;
        Ok(Self {
            endpoint,
            model: cfg.model,
            dim: cfg.dim,
            batch_size: cfg.batch_size,
            max_in_flight: cfg.max_in_flight,
        })
    }

    fn request(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = json!({ "input": texts, "model": self.model });
        let (resp, _) = self.endpoint.post(&body)?;
        parse_embedding_response(&resp, texts.len(), self.dim)
    }
}

pub(crate) fn parse_embedding_response(resp: &Value, expected: usize, dim: usize) -> Result<Vec<EmbeddingVector>> {
    #[derive(Deserialize)]
    struct Item {
        index: usize,
        embedding: Vec<f64>,
    }
    #[derive(Deserialize)]
    struct Body {
        data: Vec<Item>,
    }
    let body: Body = serde_json::from_value(resp.clone())?;
    let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
    for item in body.data {
        if item.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: item.embedding.len(),
            });
        }
        let slot = slots
            .get_mut(item.index)
            .ok_or_else(|| Error::Transport(format!("response index {} out of range", item.index)))?;
        *slot = Some(EmbeddingVector::new(item.embedding)?);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Transport(format!("response is missing index {i}"))))
        .collect()
}

impl Encoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        let mut out = self.request(&[seq.to_string()])?;
        Ok(out.remove(0))
    }

    /// Splits into `batch_size` chunks and keeps up to `max_in_flight`
    /// requests running; output order matches input order.
    fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<EmbeddingVector>> {
        let texts: Vec<String> = seqs.iter().map(TokenSequence::to_string).collect();
        let chunks: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let mut out = Vec::with_capacity(seqs.len());
        for wave in chunks.chunks(self.max_in_flight) {
            let results: Vec<Result<Vec<EmbeddingVector>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|chunk| s.spawn(|| self.request(chunk))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("worker panicked".into()))))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serialize::{Token, TokenSequence};

    fn seq(words: &[&str]) -> TokenSequence {
        TokenSequence::new(words.iter().map(|w| Token::Word(w.to_string())).collect(), 128).unwrap()
    }

    #[test]
    fn hash_encoder_unit_norm_and_deterministic() {
        let enc = HashEncoder::new(16, 3).unwrap();
        let a = enc.encode(&seq(&["a", "b", "c"])).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a, enc.encode(&seq(&["a", "b", "c"])).unwrap());
        let empty = enc.encode(&seq(&[])).unwrap();
        assert_eq!(empty.values()[0], 1.0);
        assert!(HashEncoder::new(1, 0).is_err());
    }

    #[test]
    fn store_roundtrip_and_errors() {
        let text = "d=2\ne0\t1 0\ne1\t0.5 -0.25\n";
        let store = EmbeddingStore::parse(text, Path::new("mem")).unwrap();
        assert_eq!(store.get("e0").unwrap().values(), &[1.0, 0.0]);
        assert!(matches!(store.get("e9"), Err(Error::MissingKey(_))));
        assert_eq!(EmbeddingStore::parse(&store.to_text(), Path::new("mem")).unwrap(), store);

        let bad = EmbeddingStore::parse("d=2\ne0\t1 0 0\n", Path::new("mem")).unwrap_err();
        assert!(matches!(bad, Error::Malformed { line: 2, .. }));
        assert!(EmbeddingStore::parse("e0\t1 0\n", Path::new("mem")).is_err());
    }

    #[test]
    fn embedding_response_reordered_by_index() {
        let resp = json!({"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]});
        let out = parse_embedding_response(&resp, 2, 2).unwrap();
        assert_eq!(out[0].values(), &[1.0, 0.0]);
        assert!(matches!(
            parse_embedding_response(&resp, 2, 3),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
        let short = json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]});
        assert!(parse_embedding_response(&short, 2, 2).is_err());
    }
}
