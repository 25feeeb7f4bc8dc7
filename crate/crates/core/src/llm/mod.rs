//! In-context link prediction with a chat model: BM25 retrieval of
//! candidate answers and demonstrations, prompt assembly, completion, and
//! mapping the reply back to an entity.

pub mod bm25;
pub mod client;
pub mod pipeline;
pub mod prompt;

pub use bm25::Bm25Index;
pub use client::{ChatModel, Completion, HttpChatClient, LlmClientConfig, MockChat};
pub use pipeline::{
    evaluate_llm_kgc, mock_for, parse_prediction, prompt_for, select_candidates,
    select_demonstrations, stratified_sample, LlmEvalConfig, LlmEvalReport, MockMode,
    TranscriptLine, TripleRetriever,
};
pub use prompt::{build_prompt, Demonstration, Prompt, PromptTemplate};
