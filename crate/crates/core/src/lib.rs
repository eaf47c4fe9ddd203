//! Decoupled plan/search tree reasoning for agentic retrieval.
//!
//! The crate builds reasoning trees with MCTS annotation ([`mcts`]), turns
//! them into step-level value targets ([`export`]), and answers questions with
//! hierarchical beam search pruned by separate planning and search value
//! models ([`hbs`]). Every backend sits behind a trait; [`synthworld`]
//! supplies deterministic multi-hop worlds with oracle backends for testing.

pub mod agents;
pub mod backends;
pub mod config;
pub mod error;
pub mod experiment;
pub mod export;
pub mod hbs;
pub mod mcts;
pub mod pipeline;
pub mod metrics;
#[cfg(feature = "remote")]
pub mod remote;
pub mod retrieval;
pub mod seed;
pub mod synthworld;
pub mod tree;
pub mod value;

pub use backends::Backends;
pub use error::BackendError;
pub use tree::{Document, NodeId, ReasoningNode, ReasoningTree, StepContent, Trajectory};
