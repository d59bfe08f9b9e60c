//! Confidence-guided query decomposition trees for retrieval-augmented QA.
//!
//! A question is expanded top-down into a tree: each node retrieves evidence
//! and attempts an answer, and the answer is accepted only when its
//! token-level confidence clears a threshold. Everything below the threshold
//! is either decomposed into sub-questions or abstracted into entity anchors
//! for another round of retrieval. A bottom-up pass then aggregates node
//! results into the final answer.
//!
//! Modules:
//! - [`tree`]: the node and tree data model plus JSON and DOT export
//! - [`config`]: engine knobs and validation
//! - [`llm`]: generation backends (scripted mock, HTTP wire client) and
//!   token-confidence utilities
//! - [`retrieval`]: corpus ingestion and BM25 retrieval, plus a remote
//!   retriever protocol
//! - [`engine`]: tree construction and answer aggregation
//! - [`eval`]: datasets, answer metrics, and retrieval diagnostics
//! - [`cli`]: the `ragtree` command-line interface

pub mod cli;
pub mod config;
pub mod engine;
pub mod eval;
pub mod llm;
pub mod retrieval;
pub mod tree;

pub use config::{ConfigError, EngineConfig};
pub use engine::{DecomposeOutcome, Engine, EngineError};
pub use tree::{DecompositionTree, NodeId, NodeKind, TreeNode};
