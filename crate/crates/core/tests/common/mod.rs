//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kglab::graph::{SplitPaths, TextRecord};
use kglab::llm::{self, LlmEvalConfig, TripleRetriever};
use kglab::graph::Split;
use kglab::scoring::EntityTrie;
use kglab::serialize::{self, SerializeConfig};
use kglab::{Direction, KnowledgeGraph};

pub fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

pub fn toy_dir() -> PathBuf {
    manifest_dir().join("data/toy")
}

pub fn fixture_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures")
}

pub fn toy_paths() -> SplitPaths {
    let d = toy_dir();
    SplitPaths {
        train: d.join("train.tsv"),
        valid: Some(d.join("valid.tsv")),
        test: Some(d.join("test.tsv")),
        entities: d.join("entities.tsv"),
        relations: d.join("relations.tsv"),
    }
}

pub fn toy_kg() -> KnowledgeGraph {
    KnowledgeGraph::load(&toy_paths()).unwrap()
}

/// Random graph with distinct triples spread over train/valid/test.
pub fn random_kg(num_entities: usize, num_relations: usize, num_triples: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents: Vec<TextRecord> = (0..num_entities)
        .map(|i| TextRecord::new(format!("e{i}"), format!("entity {i}"), format!("description {}", i % 7)))
        .collect();
    let rels: Vec<TextRecord> = (0..num_relations)
        .map(|i| TextRecord::new(format!("r{i}"), format!("relation {i}"), ""))
        .collect();
    let mut seen = BTreeSet::new();
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    while seen.len() < num_triples {
        let t = (
            rng.random_range(0..num_entities),
            rng.random_range(0..num_relations),
            rng.random_range(0..num_entities),
        );
        if !seen.insert(t) {
            continue;
        }
        let raw = (format!("e{}", t.0), format!("r{}", t.1), format!("e{}", t.2));
        match seen.len() % 5 {
            0 => test.push(raw),
            1 => valid.push(raw),
            _ => train.push(raw),
        }
    }
    KnowledgeGraph::from_records(ents, rels, &train, &valid, &test).unwrap()
}

fn lines(seqs: impl IntoIterator<Item = String>) -> String {
    seqs.into_iter().map(|s| s + "\n").collect()
}

/// Golden serialization files of the toy graph, keyed by file name.
pub fn serialization_goldens() -> Vec<(&'static str, String)> {
    let kg = toy_kg();
    let cfg = SerializeConfig::default();
    let plain = SerializeConfig {
        description_included: false,
        ..SerializeConfig::default()
    };
    let ctx = SerializeConfig {
        neighbor_k: 2,
        neighbor_seed: 3,
        max_len: 20,
        ..SerializeConfig::default()
    };
    let train = kg.split(Split::Train).to_vec();
    let render = |f: &dyn Fn(&kglab::Triple) -> kglab::Result<serialize::TokenSequence>| {
        lines(train.iter().map(|t| f(t).unwrap().to_string()))
    };
    vec![
        ("hr_pair.txt", render(&|t| serialize::encode_hr_pair(&kg, t.head, t.relation, &plain))),
        ("tail.txt", render(&|t| serialize::encode_tail(&kg, t.tail, &plain))),
        (
            "masked_tail.txt",
            render(&|t| serialize::encode_masked_query(&kg, t.head, t.relation, Direction::PredictTail, &plain)),
        ),
        (
            "masked_head.txt",
            render(&|t| serialize::encode_masked_query(&kg, t.tail, t.relation, Direction::PredictHead, &plain)),
        ),
        ("joint.txt", render(&|t| serialize::encode_joint_triple(&kg, t, &plain))),
        ("hr_pair_described.txt", render(&|t| serialize::encode_hr_pair(&kg, t.head, t.relation, &cfg))),
        ("hr_pair_context.txt", render(&|t| serialize::encode_hr_pair(&kg, t.head, t.relation, &ctx))),
        ("trie.txt", EntityTrie::build(&kg, &plain).unwrap().to_fixture()),
        ("prompt.txt", golden_prompt()),
    ]
}

pub fn golden_prompt() -> String {
    let kg = toy_kg();
    let cfg = LlmEvalConfig {
        num_candidates: 8,
        num_demonstrations: 2,
        with_rationale: true,
        ..LlmEvalConfig::default()
    };
    let retriever = TripleRetriever::build(&kg).unwrap();
    llm::prompt_for(&kg, &retriever, &kg.split(Split::Test)[0], &cfg).unwrap().rendered
}

/// Compares `actual` with the checked-in fixture; `KGLAB_BLESS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixture_dir().join(name);
    if std::env::var_os("KGLAB_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let first = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()));
        Err(format!("{name} differs from the fixture at line {}", first + 1))
    }
}

/// Writes a run config for the toy graph into `dir` with outputs in
/// `dir/out`, using the settings that memorize the train split.
pub fn write_toy_config(dir: &Path, model: &str, epochs: usize) -> PathBuf {
    let toy = toy_dir();
    let text = format!(
        r#"output_dir = "out"
model = "{model}"
seed = 11

[data]
entities = "{e}"
relations = "{r}"
train = "{tr}"
valid = "{va}"
test = "{te}"

[provider]
kind = "hash"

[trainer]
dim = 64
epochs = {epochs}
learning_rate = 1.0
batch_size = 8
negatives_k = 0
ema_decay = 0.0
patience = {epochs}

[llm]
sample_size = 3
num_candidates = 10
num_demonstrations = 2
"#,
        e = toy.join("entities.tsv").display(),
        r = toy.join("relations.tsv").display(),
        tr = toy.join("train.tsv").display(),
        va = toy.join("valid.tsv").display(),
        te = toy.join("test.tsv").display(),
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

pub struct CliRun {
    pub success: bool,
    pub stdout: String,
    pub stderr: String,
}

pub fn kglab(args: &[&str]) -> CliRun {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_kglab"))
        .args(args)
        .env_remove("KGLAB_API_BASE")
        .env_remove("KGLAB_API_KEY")
        .output()
        .unwrap();
    CliRun {
        success: out.status.success(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn kglab_ok(args: &[&str]) -> serde_json::Value {
    let run = kglab(args);
    assert!(run.success, "kglab {args:?} failed: {}", run.stderr);
    serde_json::from_str(&run.stdout).unwrap()
}

/// Every file under `dir`, relative path to bytes.
pub fn tree_bytes(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `logs.jsonl` with the wall-clock field removed from every record.
pub fn logs_without_timestamps(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timestamp_ms");
            v
        })
        .collect()
}
