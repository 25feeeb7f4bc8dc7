//! Link scorers that bind parameters, an encoder and the serializer into
//! something [`crate::eval::link_prediction_eval`] can rank with.

use crate::encoders::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::eval::LinkScorer;
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::linalg;
use crate::logprob::LogProbProvider;
use crate::scoring::{self, ModelParameters};
use crate::serialize::{self, Direction, SerializeConfig, TokenSequence};

/// Masked-entity model: entities are output rows, the encoder output for
/// the masked query is the context.
#[derive(Clone, Copy)]
pub struct MaskedEntityModel<'a> {
    pub kg: &'a KnowledgeGraph,
    pub params: &'a ModelParameters,
    pub encoder: &'a dyn Encoder,
    pub cfg: &'a SerializeConfig,
}

impl<'a> MaskedEntityModel<'a> {
    pub fn new(kg: &'a KnowledgeGraph, params: &'a ModelParameters, encoder: &'a dyn Encoder, cfg: &'a SerializeConfig) -> Self {
        Self { kg, params, encoder, cfg }
    }

    pub fn query_sequence(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<TokenSequence> {
        serialize::encode_masked_query(self.kg, known, relation, direction, self.cfg)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        let ctx = self.encoder.encode(seq)?;
        if ctx.dim() != self.params.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.params.dim(),
                actual: ctx.dim(),
            });
        }
        Ok(ctx)
    }

    /// Log-probability of every entity given a context vector.
    pub fn score_context(&self, context: &EmbeddingVector) -> Result<Vec<f64>> {
        let z = self.params.project_context(context.values());
        let logits: Vec<f64> = self.params.entity_table.matvec(&z);
        Ok(scoring::log_softmax(&logits))
    }
}

impl LinkScorer for MaskedEntityModel<'_> {
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        let seq = self.query_sequence(known, relation, direction)?;
        self.score_context(&self.encode(&seq)?)
    }
}

/// Two-tower cosine model with tail embeddings computed once up front.
pub struct TwoTowerModel<'a> {
    pub kg: &'a KnowledgeGraph,
    pub params: &'a ModelParameters,
    pub encoder: &'a dyn Encoder,
    pub cfg: &'a SerializeConfig,
    projected_tails: Vec<Vec<f64>>,
}

impl<'a> TwoTowerModel<'a> {
    pub fn new(kg: &'a KnowledgeGraph, params: &'a ModelParameters, encoder: &'a dyn Encoder, cfg: &'a SerializeConfig) -> Result<Self> {
        let bank = TailBank::build(kg, encoder, cfg)?;
        Ok(Self::with_bank(kg, params, encoder, cfg, &bank))
    }

    pub fn with_bank(
        kg: &'a KnowledgeGraph,
        params: &'a ModelParameters,
        encoder: &'a dyn Encoder,
        cfg: &'a SerializeConfig,
        bank: &TailBank,
    ) -> Self {
        let projected_tails = bank.vectors.iter().map(|t| params.tail_projection.matvec(t.values())).collect();
        Self {
            kg,
            params,
            encoder,
            cfg,
            projected_tails,
        }
    }

    pub fn query_vector(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        let seq = serialize::encode_query_pair(self.kg, known, relation, direction, self.cfg)?;
        Ok(self.params.query_projection.matvec(self.encoder.encode(&seq)?.values()))
    }

    pub fn score_query_vector(&self, q: &[f64]) -> Result<Vec<f64>> {
        if linalg::norm(q) == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(self
            .projected_tails
            .iter()
            .map(|t| scoring::cosine(q, t).unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

impl LinkScorer for TwoTowerModel<'_> {
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        self.score_query_vector(&self.query_vector(known, relation, direction)?)
    }
}

/// Encoder outputs of `[CLS] Xt [SEP]` for every entity, indexed by id.
#[derive(Debug, Clone)]
pub struct TailBank {
    pub vectors: Vec<EmbeddingVector>,
}

impl TailBank {
    pub fn build(kg: &KnowledgeGraph, encoder: &dyn Encoder, cfg: &SerializeConfig) -> Result<Self> {
        let seqs = kg
            .entities()
            .iter()
            .map(|e| serialize::encode_tail(kg, e.id, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vectors: encoder.encode_batch(&seqs)?,
        })
    }

    pub fn get(&self, id: EntityId) -> Result<&EmbeddingVector> {
        self.vectors.get(id.0).ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }
}

/// Joint triple classifier; every candidate is serialized as a full triple.
#[derive(Clone, Copy)]
pub struct JointModel<'a> {
    pub kg: &'a KnowledgeGraph,
    pub params: &'a ModelParameters,
    pub encoder: &'a dyn Encoder,
    pub cfg: &'a SerializeConfig,
}

impl JointModel<'_> {
    pub fn candidate_triple(known: EntityId, relation: RelationId, direction: Direction, candidate: EntityId) -> Triple {
        match direction {
            Direction::PredictTail => Triple {
                head: known,
                relation,
                tail: candidate,
            },
            Direction::PredictHead => Triple {
                head: candidate,
                relation,
                tail: known,
            },
        }
    }
}

impl LinkScorer for JointModel<'_> {
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        self.kg
            .entities()
            .iter()
            .map(|e| {
                let t = Self::candidate_triple(known, relation, direction, e.id);
                scoring::score_joint(self.params, self.encoder, self.kg, &t, self.cfg)
            })
            .collect()
    }
}

/// Generation model: each entity is scored by the log-probability of its
/// name given `[CLS] ([REVERSE]) Xknown [SEP] Xr [SEP]`.
pub struct GenerationModel<'a> {
    pub kg: &'a KnowledgeGraph,
    pub lp: &'a dyn LogProbProvider,
    pub cfg: &'a SerializeConfig,
    names: Vec<Vec<String>>,
}

impl<'a> GenerationModel<'a> {
    pub fn new(kg: &'a KnowledgeGraph, lp: &'a dyn LogProbProvider, cfg: &'a SerializeConfig) -> Result<Self> {
        let names = kg
            .entities()
            .iter()
            .map(|e| serialize::entity_name_tokens(kg, e.id, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kg, lp, cfg, names })
    }

    pub fn context(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<String>> {
        Ok(serialize::encode_query_pair(self.kg, known, relation, direction, self.cfg)?.rendered_tokens())
    }
}

impl LinkScorer for GenerationModel<'_> {
    fn score_candidates(&self, known: EntityId, relation: RelationId, direction: Direction) -> Result<Vec<f64>> {
        let ctx = self.context(known, relation, direction)?;
        self.names
            .iter()
            .map(|name| match scoring::score_generation(self.lp, &ctx, name) {
                Ok(s) => Ok(s),
                Err(Error::OutOfVocabulary(_)) => Ok(f64::NEG_INFINITY),
                Err(e) => Err(e),
            })
            .collect()
    }
}
