//! Text-based knowledge-graph embedding toolkit.
//!
//! Loads a knowledge graph with entity and relation text, serializes queries
//! into token sequences, scores candidates with several model families,
//! trains them, evaluates with filtered ranking metrics, and drives an
//! in-context LLM completion pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod http;
pub mod linalg;
pub mod llm;
pub mod logprob;
pub mod models;
pub mod scoring;
pub mod serialize;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use graph::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use serialize::Direction;
