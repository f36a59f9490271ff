//! Batched optimization of a shared user-profile prompt for LLM reranking.
//!
//! A recommender hands us a top-k list per user. An LLM writes a preference
//! profile for each user from their interaction history and a shared
//! profile-generation prompt, then reorders the list using that profile.
//! Position feedback on where the ground-truth items landed is verbalized,
//! weighted, summarized per batch and turned into a revision of the shared
//! prompt.
//!
//! This crate is `no_std` (with `alloc`). Everything that touches files,
//! the network or threads lives in the `agp` companion crate; the pieces here
//! only talk to a model through the [`gateway::Llm`] trait.
//!
//! The [`mock`] module provides a deterministic language model whose
//! behaviour is a pure function of the request text. Together with
//! [`synth`] it forms an offline world where "better prompts" are
//! measurable.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod eval;
pub mod feedback;
pub mod gateway;
pub mod mock;
pub mod optimizer;
pub mod profile;
pub mod prompts;
pub mod rerank;
pub mod synth;

pub use dataset::{
    BaselineRanking, DatasetBundle, DatasetError, InteractionRecord, RankedItem, Split, UserRecord,
};
pub use eval::{average_position, ndcg_at_k, MetricReport, UserResult, NDCG_CUTOFF};
pub use feedback::{batch_weight, compute_feedback, FeedbackPair, FeedbackSet};
pub use gateway::{
    expected_calls, CallEstimate, CallLedger, ChatRequest, ChatResponse, Gateway, GatewayError,
    LedgerSnapshot, Llm, Purpose,
};
pub use mock::{MockBackend, MockWorldState};
pub use optimizer::{train, RunState, TrainConfig, TrainError};
pub use profile::{PromptOrigin, PromptState, UserProfile};
pub use rerank::{parse_ranking, RerankMode, RerankedList};
pub use synth::{generate_synthetic_world, SyntheticWorldSpec};
