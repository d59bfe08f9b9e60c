//! Tree data model shared by the engine, the evaluator, and the CLI.
//!
//! A run produces a [`DecompositionTree`]: query nodes expand into
//! sub-questions, answer nodes close a branch with an accepted answer, and
//! entity nodes anchor fallback retrieval when a query can neither be
//! answered nor split further.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;

/// Dense node identifier assigned in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Role a node plays in the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    /// Closed with an accepted (or forced) answer.
    Answer,
    /// An open or expanded question.
    Query,
    /// Entity anchors used for fallback retrieval.
    Entity,
}

/// One node of a decomposition tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Question text; empty for entity nodes.
    pub query: String,
    /// Query text of the parent node; empty at the root.
    pub parent_query: String,
    /// Entity anchors; nonempty only for entity nodes.
    pub entities: Vec<String>,
    /// Ids of the documents retrieved for this node.
    pub context: Vec<String>,
    /// Candidate, accepted, or aggregated answer text; may be empty.
    pub answer: String,
    /// Geometric-mean token confidence of an accepted answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub depth: usize,
    pub children: Vec<NodeId>,
}

/// Candidate answer pruned by the confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedCandidate {
    pub node: NodeId,
    pub query: String,
    pub answer: String,
    pub confidence: f64,
}

/// Run diagnostics that are not part of the serialized tree.
#[derive(Debug, Clone, Default)]
pub struct RunTelemetry {
    /// Nodes resolved without retrieval because the call cap was reached.
    pub forced: BTreeSet<NodeId>,
    /// Nodes whose generation failed or refused to produce an answer.
    pub failed: BTreeSet<NodeId>,
    /// Answer candidates rejected by the confidence gate.
    pub rejected: Vec<RejectedCandidate>,
}

/// Result of expanding one question top-down.
///
/// Serializes as `{"root", "nodes", "retrieval_calls", "final_answer"}`;
/// wall time and telemetry are in-memory diagnostics only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionTree {
    pub root: NodeId,
    pub nodes: Vec<TreeNode>,
    pub retrieval_calls: u32,
    pub final_answer: String,
    #[serde(skip)]
    pub wall_time: Duration,
    #[serde(skip)]
    pub telemetry: RunTelemetry,
}

/// Violation found by [`DecompositionTree::validate_structure`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("node at position {position} has id {id}; ids must be dense and creation-ordered")]
    NonContiguousIds { position: usize, id: usize },
    #[error("root must be node 0, got {0}")]
    BadRoot(NodeId),
    #[error("node {node}: {reason}")]
    InvalidNode { node: NodeId, reason: String },
    #[error("{reachable} of {total} nodes reachable from the root; the tree must be connected")]
    Disconnected { reachable: usize, total: usize },
    #[error("retrieval calls {calls} exceed cap {cap}")]
    RetrievalCapExceeded { calls: u32, cap: u32 },
}

fn node_err(node: NodeId, reason: impl Into<String>) -> TreeError {
    TreeError::InvalidNode {
        node,
        reason: reason.into(),
    }
}

impl DecompositionTree {
    /// Starts a tree holding a single root query node.
    pub fn new(question: impl Into<String>) -> Self {
        let root = TreeNode {
            id: NodeId(0),
            kind: NodeKind::Query,
            query: question.into(),
            parent_query: String::new(),
            entities: Vec::new(),
            context: Vec::new(),
            answer: String::new(),
            confidence: None,
            depth: 0,
            children: Vec::new(),
        };
        DecompositionTree {
            root: NodeId(0),
            nodes: vec![root],
            retrieval_calls: 0,
            final_answer: String::new(),
            wall_time: Duration::ZERO,
            telemetry: RunTelemetry::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.index()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id.index()]
    }

    /// Appends a child under `parent`, wiring depth and denormalized parent
    /// query, and returns the new id.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        kind: NodeKind,
        query: impl Into<String>,
        entities: Vec<String>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        let (parent_query, depth) = {
            let p = self.node(parent);
            (p.query.clone(), p.depth + 1)
        };
        self.nodes.push(TreeNode {
            id,
            kind,
            query: query.into(),
            parent_query,
            entities,
            context: Vec::new(),
            answer: String::new(),
            confidence: None,
            depth,
            children: Vec::new(),
        });
        self.node_mut(parent).children.push(id);
        id
    }

    /// Maximum node depth; 0 for a single-node tree.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Union of all retrieved document ids, sorted and duplicate-free.
    pub fn retrieved_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.context.iter().map(String::as_str))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Pretty JSON in the documented shape.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// True when both trees serialize to the same nodes, root, call count,
    /// and final answer. Wall time and telemetry are ignored.
    pub fn structurally_eq(&self, other: &Self) -> bool {
        self.root == other.root
            && self.retrieval_calls == other.retrieval_calls
            && self.final_answer == other.final_answer
            && self.nodes == other.nodes
    }

    /// Graphviz DOT rendering with kind, truncated query, and confidence per
    /// node.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph decomposition {\n  rankdir=TB;\n  node [shape=box];\n");
        for node in &self.nodes {
            let text = if node.kind == NodeKind::Entity {
                node.entities.join(", ")
            } else {
                node.query.clone()
            };
            let conf = match node.confidence {
                Some(c) => format!("{c:.3}"),
                None => "-".to_string(),
            };
            let label = format!(
                "{:?} #{}\\n{}\\nconf {}",
                node.kind,
                node.id,
                dot_escape(&truncate_chars(&text, 40)),
                conf
            )
            .to_lowercase();
            out.push_str(&format!("  n{} [label=\"{}\"];\n", node.id, label));
        }
        for node in &self.nodes {
            for child in &node.children {
                out.push_str(&format!("  n{} -> n{};\n", node.id, child));
            }
        }
        out.push_str("}\n");
        out
    }

    /// Checks the structural rules a finished run must satisfy.
    ///
    /// Answer nodes may carry an empty answer only together with an absent
    /// confidence (a forced or failed leaf); entity leaves may sit one level
    /// below the query depth cap.
    pub fn validate_structure(&self, cfg: &EngineConfig) -> Result<(), TreeError> {
        if self.nodes.is_empty() {
            return Err(TreeError::Empty);
        }
        for (position, node) in self.nodes.iter().enumerate() {
            if node.id.index() != position {
                return Err(TreeError::NonContiguousIds {
                    position,
                    id: node.id.index(),
                });
            }
        }
        if self.root != NodeId(0) {
            return Err(TreeError::BadRoot(self.root));
        }

        let mut seen_as_child = vec![false; self.nodes.len()];
        for node in &self.nodes {
            let mut prev: Option<NodeId> = None;
            for &child in &node.children {
                let Some(c) = self.nodes.get(child.index()) else {
                    return Err(node_err(node.id, format!("child {child} does not exist")));
                };
                if child <= node.id {
                    return Err(node_err(
                        node.id,
                        format!("child {child} was created before its parent"),
                    ));
                }
                if let Some(p) = prev {
                    if child <= p {
                        return Err(node_err(node.id, "children are not in creation order"));
                    }
                }
                prev = Some(child);
                if seen_as_child[child.index()] {
                    return Err(node_err(child, "node has more than one parent"));
                }
                seen_as_child[child.index()] = true;
                if c.depth != node.depth + 1 {
                    return Err(node_err(
                        child,
                        format!(
                            "depth {} does not follow parent depth {}",
                            c.depth, node.depth
                        ),
                    ));
                }
                if c.parent_query != node.query {
                    return Err(node_err(child, "parent_query does not match the parent"));
                }
            }
        }
        if seen_as_child[0] {
            return Err(node_err(NodeId(0), "root must not be a child"));
        }
        let reachable = seen_as_child.iter().skip(1).filter(|s| **s).count() + 1;
        if reachable != self.nodes.len() {
            return Err(TreeError::Disconnected {
                reachable,
                total: self.nodes.len(),
            });
        }

        for node in &self.nodes {
            if let Some(c) = node.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(node_err(node.id, format!("confidence {c} outside [0, 1]")));
                }
            }
            if node.context.len() > cfg.top_k {
                return Err(node_err(
                    node.id,
                    format!(
                        "context holds {} ids, cap is {}",
                        node.context.len(),
                        cfg.top_k
                    ),
                ));
            }
            let mut ids = BTreeSet::new();
            for id in &node.context {
                if !ids.insert(id.as_str()) {
                    return Err(node_err(node.id, format!("duplicate context id `{id}`")));
                }
            }
            match node.kind {
                NodeKind::Answer => {
                    if !node.children.is_empty() {
                        return Err(node_err(node.id, "answer nodes must be leaves"));
                    }
                    if node.answer.is_empty() != node.confidence.is_none() {
                        return Err(node_err(
                            node.id,
                            "answer text and confidence must be present together",
                        ));
                    }
                    if node.depth > cfg.max_depth {
                        return Err(node_err(node.id, "answer node below the depth cap"));
                    }
                }
                NodeKind::Query => {
                    if node.query.trim().is_empty() {
                        return Err(node_err(node.id, "query nodes need question text"));
                    }
                    if node.children.is_empty() {
                        return Err(node_err(
                            node.id,
                            "query node left unexpanded; it should have been re-kinded",
                        ));
                    }
                    if node.children.len() > cfg.max_branching {
                        return Err(node_err(
                            node.id,
                            format!(
                                "{} children exceed max_branching {}",
                                node.children.len(),
                                cfg.max_branching
                            ),
                        ));
                    }
                    if node.depth > cfg.max_depth {
                        return Err(node_err(node.id, "query node below the depth cap"));
                    }
                }
                NodeKind::Entity => {
                    if node.entities.is_empty() || node.entities.iter().any(|e| e.trim().is_empty())
                    {
                        return Err(node_err(node.id, "entity nodes need nonempty anchors"));
                    }
                    if node.entities.len() > cfg.max_branching {
                        return Err(node_err(
                            node.id,
                            format!(
                                "{} anchors exceed max_branching {}",
                                node.entities.len(),
                                cfg.max_branching
                            ),
                        ));
                    }
                    if !node.children.is_empty() {
                        return Err(node_err(node.id, "entity nodes must be leaves"));
                    }
                    if node.parent_query.trim().is_empty() {
                        return Err(node_err(node.id, "entity nodes need a parent query"));
                    }
                    if node.depth > cfg.max_depth + 1 {
                        return Err(node_err(node.id, "entity node below the depth cap"));
                    }
                }
            }
        }

        if self.retrieval_calls > cfg.retrieval_cap {
            return Err(TreeError::RetrievalCapExceeded {
                calls: self.retrieval_calls,
                cap: cfg.retrieval_cap,
            });
        }
        Ok(())
    }
}

fn truncate_chars(s: &str, limit: usize) -> String {
    if s.chars().count() <= limit {
        s.to_string()
    } else {
        let head: String = s.chars().take(limit).collect();
        format!("{head}...")
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', " ")
}
