//! Command-line front end: run configuration, encoder selection, and the
//! `ingest`, `train`, `eval`, `predict`, `llm` and `cost` commands.
//!
//! Every command writes its primary output under the configured output
//! directory and prints a JSON summary on stdout. Outputs other than the
//! timestamps in `logs.jsonl` depend only on the inputs and the seed.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::encoders::{Encoder, FileStoreEncoder, HashEncoder, RemoteEncoder, RemoteEncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{self, CostMethod, CostModelInput, Directions, LinkScorer};
use crate::graph::{FilterIndex, KnowledgeGraph, Split, SplitPaths};
use crate::llm::{self, ChatModel, HttpChatClient, LlmClientConfig, LlmEvalConfig, MockMode};
use crate::logprob::BigramLogProbs;
use crate::models::{GenerationModel, JointModel, MaskedEntityModel, TwoTowerModel};
use crate::scoring::ModelParameters;
use crate::serialize::{self, Direction, SerializeConfig};
use crate::tasks;
use crate::training::{JsonlLogger, ModelKind, Trainer, TrainerConfig};

pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "logs.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub entities: PathBuf,
    pub relations: PathBuf,
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hash,
    File,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Hashing seed of the `hash` encoder.
    pub hash_seed: u64,
    /// Store file for the `file` encoder.
    pub path: Option<PathBuf>,
    /// Model name sent to a `remote` encoder.
    pub model: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Hash,
            hash_seed: 0,
            path: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSection {
    /// Chat model name sent to the endpoint.
    pub model: String,
    #[serde(flatten)]
    pub eval: LlmEvalConfig,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            eval: LlmEvalConfig::default(),
        }
    }
}

/// TOML run description. Relative paths resolve against the config file's
/// directory. The top-level `seed` overrides the seeds inside the trainer,
/// serializer and LLM sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default)]
    pub provider: ProviderConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub serialize: SerializeConfig,
    #[serde(default)]
    pub llm: LlmSection,
}

fn default_model() -> ModelKind {
    ModelKind::MaskedEntity
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data.entities);
        resolve(&mut cfg.data.relations);
        resolve(&mut cfg.data.train);
        cfg.data.valid.as_mut().map(resolve);
        cfg.data.test.as_mut().map(resolve);
        cfg.provider.path.as_mut().map(resolve);
        resolve(&mut cfg.output_dir);
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
        self.serialize.neighbor_seed = seed;
        self.llm.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.serialize.validate()?;
        match (self.provider.kind, &self.provider.path) {
            (ProviderKind::File, None) => Err(Error::Config("provider kind \"file\" needs provider.path".into())),
            _ => Ok(()),
        }
    }

    pub fn split_paths(&self) -> SplitPaths {
        SplitPaths {
            train: self.data.train.clone(),
            valid: self.data.valid.clone(),
            test: self.data.test.clone(),
            entities: self.data.entities.clone(),
            relations: self.data.relations.clone(),
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join(CHECKPOINT_DIR)
    }
}

#[derive(Debug, Parser)]
#[command(name = "kglab", version, about = "Text-based knowledge-graph embedding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and index the dataset, write the graph snapshot.
    Ingest(Common),
    /// Train the configured model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Cap the run at two epochs of five batches.
        #[arg(long)]
        fast_run: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Overrides `trainer.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `trainer.learning_rate`.
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Filtered link-prediction metrics of the trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "both")]
        directions: Directions,
        /// Also write per-query ranks as TSV.
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// Rank answers for one query, or for a free-text question.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Raw id of the known entity.
        #[arg(long, required_unless_present = "question")]
        entity: Option<String>,
        /// Raw id of the relation.
        #[arg(long, required_unless_present = "question")]
        relation: Option<String>,
        #[arg(long, default_value = "tail")]
        direction: Direction,
        /// One-hop question answered through the masked-entity head.
        #[arg(long, conflicts_with_all = ["entity", "relation"])]
        question: Option<String>,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
    },
    /// In-context link prediction with a chat model.
    Llm {
        #[command(flatten)]
        common: Common,
        /// Number of test queries, stratified by relation.
        #[arg(long)]
        sample: Option<usize>,
        /// Offline mock instead of the HTTP endpoint.
        #[arg(long)]
        mock: Option<MockMode>,
        #[arg(long)]
        rationale: bool,
    },
    /// Operation-count model of the text-based methods.
    Cost {
        /// Method name, or `all`.
        #[arg(long, default_value = "all")]
        method: String,
        /// Triple description length.
        #[arg(long = "length", short = 'l')]
        l: f64,
        /// Entity count.
        #[arg(long = "entities", short = 'e')]
        e: f64,
        /// Relation count.
        #[arg(long = "relations", short = 'r')]
        r: f64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Graph from the snapshot when one exists, otherwise from the data files.
pub fn load_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let snap = cfg.output_dir.join(SNAPSHOT_FILE);
    if snap.exists() {
        KnowledgeGraph::read_snapshot(&snap)
    } else {
        KnowledgeGraph::load(&cfg.split_paths())
    }
}

pub fn build_encoder(cfg: &RunConfig) -> Result<Box<dyn Encoder>> {
    let dim = cfg.trainer.dim;
    let enc: Box<dyn Encoder> = match cfg.provider.kind {
        ProviderKind::Hash => Box::new(HashEncoder::new(dim, cfg.provider.hash_seed)?),
        ProviderKind::File => {
            let path = cfg.provider.path.as_ref().ok_or_else(|| Error::Config("provider.path is not set".into()))?;
            Box::new(FileStoreEncoder::load(path)?)
        }
        ProviderKind::Remote => {
            let model = cfg.provider.model.clone().unwrap_or_else(|| "text-embedding-3-small".into());
            Box::new(RemoteEncoder::new(RemoteEncoderConfig::from_env(model, dim)?)?)
        }
    };
    if enc.dim() != dim {
        return Err(Error::Config(format!(
            "encoder produces {}-dimensional vectors but trainer.dim is {dim}",
            enc.dim()
        )));
    }
    Ok(enc)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Value> {
    let kg = KnowledgeGraph::load(&cfg.split_paths())?;
    FilterIndex::build(&kg);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    kg.write_snapshot(&cfg.output_dir.join(SNAPSHOT_FILE))?;
    Ok(serde_json::to_value(kg.report())?)
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Value> {
    let kg = load_graph(cfg)?;
    let encoder = build_encoder(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let ckpt = cfg.checkpoint_dir();
    let state = if resume {
        let (state, header) = checkpoint::load_checkpoint(&ckpt, &kg)?;
        if header.kind != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, config asks for {}",
                header.kind, cfg.model
            )));
        }
        Some(state)
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        None
    };
    let logger = JsonlLogger::append(&log_path)?;
    let mut trainer = Trainer::new(&kg, encoder.as_ref(), &cfg.serialize, cfg.trainer.clone(), cfg.model)?.with_plugin(logger);
    let state = trainer.fit(state)?;
    checkpoint::save_checkpoint(&ckpt, &kg, &state, &cfg.trainer, &cfg.serialize)?;
    let valid = trainer.evaluate_step(&state)?;
    let summary = json!({
        "model": cfg.model,
        "epoch": state.epoch,
        "step": state.step,
        "stopped_early": state.stopped_early,
        "best_valid_hits1": state.best_valid,
        "valid": valid,
    });
    write_json(&cfg.output_dir.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

/// Bigram model over entity-name tokens, fitted on train queries followed
/// by their answers.
pub fn fit_generation_lm(kg: &KnowledgeGraph, ser: &SerializeConfig) -> Result<BigramLogProbs> {
    let mut vocab = Vec::new();
    for e in kg.entities() {
        vocab.extend(serialize::entity_name_tokens(kg, e.id, ser)?);
    }
    let mut corpus = Vec::new();
    for t in kg.split(Split::Train) {
        for (known, dir, gold) in [(t.head, Direction::PredictTail, t.tail), (t.tail, Direction::PredictHead, t.head)] {
            let mut seq = serialize::encode_query_pair(kg, known, t.relation, dir, ser)?.rendered_tokens();
            seq.extend(serialize::entity_name_tokens(kg, gold, ser)?);
            corpus.push(seq);
        }
    }
    BigramLogProbs::fit(vocab, corpus.iter().map(Vec::as_slice), 0.1)
}

/// Runs `f` with the scorer for the configured model kind.
fn with_scorer<T>(cfg: &RunConfig, kg: &KnowledgeGraph, f: impl FnOnce(&dyn LinkScorer, Option<&MaskedEntityModel<'_>>) -> Result<T>) -> Result<T> {
    match cfg.model {
        ModelKind::Generation => {
            let lm = fit_generation_lm(kg, &cfg.serialize)?;
            let model = GenerationModel::new(kg, &lm, &cfg.serialize)?;
            f(&model, None)
        }
        ModelKind::Llm => Err(Error::Config("llm models are evaluated with the `llm` command".into())),
        kind => {
            let encoder = build_encoder(cfg)?;
            let (state, _) = checkpoint::load_checkpoint(&cfg.checkpoint_dir(), kg)?;
            if state.kind != kind {
                return Err(Error::Config(format!("checkpoint holds a {} model, config asks for {kind}", state.kind)));
            }
            let params: &ModelParameters = state.eval_params();
            let enc = encoder.as_ref();
            let ser = &cfg.serialize;
            match kind {
                ModelKind::MaskedEntity => {
                    let m = MaskedEntityModel::new(kg, params, enc, ser);
                    f(&m, Some(&m))
                }
                ModelKind::TwoTower => f(&TwoTowerModel::new(kg, params, enc, ser)?, None),
                _ => f(
                    &JointModel {
                        kg,
                        params,
                        encoder: enc,
                        cfg: ser,
                    },
                    None,
                ),
            }
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig, split: Split, directions: Directions, ranks: Option<&Path>) -> Result<Value> {
    let kg = load_graph(cfg)?;
    let filter = FilterIndex::build(&kg);
    let (report, results) = with_scorer(cfg, &kg, |scorer, _| eval::link_prediction_eval(scorer, &kg, split, &filter, directions))?;
    if let Some(path) = ranks {
        fs::write(path, eval::ranks_tsv(&kg, &results)?).map_err(|e| Error::io(path, e))?;
    }
    let out = json!({
        "model": cfg.model,
        "split": split,
        "directions": directions,
        "metrics": report,
    });
    write_json(&cfg.output_dir.join(METRICS_FILE), &out)?;
    Ok(out)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    query: Option<(&str, &str, Direction)>,
    question: Option<&str>,
    top_n: usize,
) -> Result<Value> {
    let kg = load_graph(cfg)?;
    let ranked = with_scorer(cfg, &kg, |scorer, masked| match (query, question) {
        (_, Some(q)) => {
            let m = masked.ok_or_else(|| Error::Config("questions need a masked_entity model".into()))?;
            tasks::qa_answer(m, q, top_n).map(|r| r.into_iter().map(|x| (x.entity, x.score)).collect::<Vec<_>>())
        }
        (Some((e, r, dir)), None) => {
            let (known, rel) = (kg.entity_by_raw(e)?, kg.relation_by_raw(r)?);
            let scores = scorer.score_candidates(known, rel, dir)?;
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            Ok(idx.into_iter().take(top_n).map(|i| (crate::graph::EntityId(i), scores[i])).collect())
        }
        (None, None) => Err(Error::InvalidArgument("give --entity and --relation, or --question".into())),
    })?;
    let rows = ranked
        .into_iter()
        .map(|(id, score)| {
            let e = kg.entity(id)?;
            Ok(json!({ "entity": e.raw_id, "name": e.name, "score": score }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Value::Array(rows))
}

pub fn cmd_llm(cfg: &RunConfig, sample: Option<usize>, mock: Option<MockMode>, rationale: bool) -> Result<Value> {
    let kg = load_graph(cfg)?;
    let mut eval_cfg = cfg.llm.eval.clone();
    if let Some(n) = sample {
        eval_cfg.sample_size = n;
    }
    eval_cfg.with_rationale |= rationale;
    let client: Box<dyn ChatModel> = match mock {
        Some(mode) => Box::new(llm::mock_for(&kg, &eval_cfg, mode)?),
        None => Box::new(HttpChatClient::new(LlmClientConfig::from_env(cfg.llm.model.clone())?)?),
    };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(TRANSCRIPT_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut writer = BufWriter::new(file);
    let (report, _) = llm::evaluate_llm_kgc(&kg, client.as_ref(), &eval_cfg, Some(&mut writer))?;
    let out = json!({
        "model": ModelKind::Llm,
        "mock": mock,
        "hits1": report.hits1,
        "count": report.count,
    });
    write_json(&cfg.output_dir.join(METRICS_FILE), &out)?;
    Ok(out)
}

pub fn cmd_cost(method: &str, l: f64, e: f64, r: f64) -> Result<Value> {
    let methods: Vec<CostMethod> = if method.eq_ignore_ascii_case("all") {
        CostMethod::ALL.to_vec()
    } else {
        vec![method.parse()?]
    };
    let rows = methods
        .into_iter()
        .map(|method| eval::cost_model(&CostModelInput { l, e, r, method }))
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_value(rows)?)
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Ingest(c) => cmd_ingest(&load_config(&c)?),
        Command::Train {
            common,
            fast_run,
            resume,
            epochs,
            learning_rate,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.trainer.fast_run |= fast_run;
            if let Some(n) = epochs {
                cfg.trainer.epochs = n;
            }
            if let Some(lr) = learning_rate {
                cfg.trainer.learning_rate = lr;
            }
            cfg.validate()?;
            cmd_train(&cfg, resume)
        }
        Command::Eval {
            common,
            split,
            directions,
            ranks,
        } => cmd_eval(&load_config(&common)?, split, directions, ranks.as_deref()),
        Command::Predict {
            common,
            entity,
            relation,
            direction,
            question,
            top_n,
        } => {
            let cfg = load_config(&common)?;
            let query = entity.as_deref().zip(relation.as_deref()).map(|(e, r)| (e, r, direction));
            cmd_predict(&cfg, query, question.as_deref(), top_n)
        }
        Command::Llm {
            common,
            sample,
            mock,
            rationale,
        } => cmd_llm(&load_config(&common)?, sample, mock, rationale),
        Command::Cost { method, l, e, r } => cmd_cost(&method, l, e, r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_resolves_paths_and_seed() {
        let text = r#"
            output_dir = "out"
            seed = 7
            model = "two_tower"
            [data]
            entities = "e.tsv"
            relations = "/abs/r.tsv"
            train = "t.tsv"
            [trainer]
            epochs = 3
        "#;
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.data.entities, PathBuf::from("/base/e.tsv"));
        assert_eq!(cfg.data.relations, PathBuf::from("/abs/r.tsv"));
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.model, ModelKind::TwoTower);
        assert_eq!((cfg.trainer.seed, cfg.llm.eval.seed, cfg.trainer.epochs), (7, 7, 3));
        assert!(RunConfig::parse("output_dir = 1", Path::new(".")).is_err());
        let bad = text.replace("epochs = 3", "epoch = 3");
        assert!(matches!(RunConfig::parse(&bad, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn cost_command() {
        let rows = cmd_cost("KG-BERT", 2.0, 3.0, 5.0).unwrap();
        assert_eq!(rows[0]["value"], 180.0);
        assert_eq!(cmd_cost("all", 2.0, 3.0, 5.0).unwrap().as_array().unwrap().len(), 6);
        assert!(cmd_cost("transe", 1.0, 1.0, 1.0).is_err());
    }
}
