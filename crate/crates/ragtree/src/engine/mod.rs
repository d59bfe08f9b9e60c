//! Tree construction and bottom-up answer aggregation.
//!
//! The engine expands a question top-down: each open query node retrieves
//! evidence, then either answers (if the answer clears the confidence
//! threshold), splits into sub-queries (if decomposable and above the depth
//! cap), or falls back to entity-anchored retrieval. Retrieval stops at a
//! global call cap; nodes popped after that close with a forced answer
//! attempt over whatever context they have. A second bottom-up pass turns
//! leaf evidence into answers and aggregates children into their parents,
//! finishing at the root.

pub mod prompts;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, EngineConfig};
use crate::llm::{
    confidence, extract_answer_span, span_text, GenerationRequest, GenerationResult, LanguageModel,
    LlmError, ANSWER_MARKER,
};
use crate::retrieval::{RetrievalError, Retriever};
use crate::tree::{DecompositionTree, NodeId, NodeKind, RejectedCandidate};

use prompts::{PromptError, PromptSet, TemplateRole, CANNOT_ANSWER, CANNOT_DECOMPOSE, NO_EVIDENCE};

/// Appended to a list prompt when the first reply did not parse.
pub const REPROMPT_SUFFIX: &str =
    "\n\nYour previous reply was not in the required format. Follow the format instructions exactly.";

/// Three-way decision for one open query node.
#[derive(Debug, Clone, PartialEq)]
pub enum DecomposeOutcome {
    /// Close the node with an accepted answer.
    Answer { text: String, confidence: f64 },
    /// Expand the node into sub-queries.
    Split { sub_queries: Vec<String> },
    /// Fall back to entity-anchored retrieval.
    Entities { entities: Vec<String> },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// What `decide` settled on for one node. A `None` outcome marks a node
/// whose generations failed or stayed malformed; the node closes empty.
struct Decision {
    outcome: Option<DecomposeOutcome>,
    rejected: Option<(String, f64)>,
}

enum Processed {
    Decided {
        context: Vec<String>,
        decision: Decision,
    },
    Forced {
        accepted: Option<(String, f64)>,
    },
}

/// Read-only snapshot of a node handed to a worker.
struct NodeView {
    query: String,
    parent_query: String,
    depth: usize,
    context: Vec<String>,
}

enum LineReply {
    Lines(Vec<String>),
    Sentinel,
    Malformed,
}

/// Shared cap on retrieval calls for one run.
struct CallBudget {
    used: AtomicU32,
    cap: u32,
}

impl CallBudget {
    fn new(cap: u32) -> Self {
        CallBudget {
            used: AtomicU32::new(0),
            cap,
        }
    }

    fn try_reserve(&self) -> bool {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                (u < self.cap).then_some(u + 1)
            })
            .is_ok()
    }

    fn used(&self) -> u32 {
        self.used.load(Ordering::SeqCst)
    }
}

/// Drives one question through expansion and aggregation.
pub struct Engine<'a> {
    cfg: EngineConfig,
    prompts: PromptSet,
    llm: &'a dyn LanguageModel,
    retriever: &'a dyn Retriever,
}

impl<'a> Engine<'a> {
    /// Validates the config and resolves its prompt set.
    pub fn new(
        cfg: EngineConfig,
        llm: &'a dyn LanguageModel,
        retriever: &'a dyn Retriever,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        let prompts = PromptSet::resolve(&cfg.prompt_set)?;
        Ok(Engine {
            cfg,
            prompts,
            llm,
            retriever,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Answers one question: builds the tree, aggregates bottom-up, and
    /// returns the finished tree with `final_answer` set.
    pub fn run(&self, question: &str) -> Result<DecompositionTree, EngineError> {
        let started = Instant::now();
        let mut tree = self.build_tree(question)?;
        tree.final_answer = self.backtrace(&mut tree)?;
        tree.wall_time = started.elapsed();
        #[cfg(debug_assertions)]
        if let Err(e) = tree.validate_structure(&self.cfg) {
            panic!("engine produced a structurally invalid tree: {e}");
        }
        Ok(tree)
    }

    /// Top-down expansion: a FIFO frontier of open query nodes, processed
    /// in batches of up to `parallelism`. Slots against the retrieval cap
    /// are reserved sequentially in node-id order before workers run, and
    /// outcomes apply sequentially in node-id order afterwards, so a batch
    /// size of one reproduces the plain sequential algorithm exactly.
    fn build_tree(&self, question: &str) -> Result<DecompositionTree, EngineError> {
        if question.trim().is_empty() {
            return Err(EngineError::EmptyQuestion);
        }
        let mut tree = DecompositionTree::new(question.trim());
        let budget = CallBudget::new(self.cfg.retrieval_cap);
        let mut queue: VecDeque<NodeId> = VecDeque::new();
        queue.push_back(tree.root);

        while !queue.is_empty() {
            let take = self.cfg.parallelism.min(queue.len());
            let batch: Vec<NodeId> = queue.drain(..take).collect();
            let reserved: Vec<bool> = batch.iter().map(|_| budget.try_reserve()).collect();
            let views: Vec<NodeView> = batch
                .iter()
                .map(|&id| {
                    let n = tree.node(id);
                    NodeView {
                        query: n.query.clone(),
                        parent_query: n.parent_query.clone(),
                        depth: n.depth,
                        context: n.context.clone(),
                    }
                })
                .collect();

            let results: Vec<Result<Processed, EngineError>> = if take == 1 {
                let view = views.into_iter().next().expect("batch of one");
                vec![self.process(view, reserved[0])]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = views
                        .into_iter()
                        .zip(reserved.iter().copied())
                        .map(|(view, slot)| scope.spawn(move || self.process(view, slot)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("engine worker panicked"))
                        .collect()
                })
            };

            for (i, result) in results.into_iter().enumerate() {
                let id = batch[i];
                match result? {
                    Processed::Forced { accepted } => {
                        let node = tree.node_mut(id);
                        node.kind = NodeKind::Answer;
                        match accepted {
                            Some((text, conf)) => {
                                node.answer = text;
                                node.confidence = Some(conf);
                            }
                            None => {
                                tree.telemetry.failed.insert(id);
                            }
                        }
                        tree.telemetry.forced.insert(id);
                    }
                    Processed::Decided { context, decision } => {
                        tree.node_mut(id).context = context;
                        if let Some((answer, conf)) = decision.rejected {
                            let query = tree.node(id).query.clone();
                            tree.telemetry.rejected.push(RejectedCandidate {
                                node: id,
                                query,
                                answer,
                                confidence: conf,
                            });
                        }
                        match decision.outcome {
                            None => {
                                tree.node_mut(id).kind = NodeKind::Answer;
                                tree.telemetry.failed.insert(id);
                            }
                            Some(DecomposeOutcome::Answer { text, confidence }) => {
                                let node = tree.node_mut(id);
                                node.kind = NodeKind::Answer;
                                node.answer = text;
                                node.confidence = Some(confidence);
                            }
                            Some(DecomposeOutcome::Split { sub_queries }) => {
                                for sq in sub_queries {
                                    let child = tree.add_child(id, NodeKind::Query, sq, Vec::new());
                                    queue.push_back(child);
                                }
                            }
                            Some(DecomposeOutcome::Entities { entities }) => {
                                let child = tree.add_child(id, NodeKind::Entity, "", entities);
                                if budget.try_reserve() {
                                    let anchors = tree.node(child).entities.clone();
                                    match self.retriever.retrieve_entities(&anchors, self.cfg.top_k)
                                    {
                                        Ok(hits) => {
                                            tree.node_mut(child).context =
                                                hits.into_iter().map(|h| h.id).collect();
                                        }
                                        Err(RetrievalError::EmptyQuery) => {}
                                        Err(e) => return Err(e.into()),
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        tree.retrieval_calls = budget.used();
        Ok(tree)
    }

    fn process(&self, mut view: NodeView, reserved: bool) -> Result<Processed, EngineError> {
        if !reserved {
            let accepted = self.forced_answer(&view)?;
            return Ok(Processed::Forced { accepted });
        }
        match self.retriever.retrieve(&view.query, self.cfg.top_k) {
            Ok(hits) => view.context = hits.into_iter().map(|h| h.id).collect(),
            Err(RetrievalError::EmptyQuery) => {
                return Ok(Processed::Decided {
                    context: Vec::new(),
                    decision: Decision {
                        outcome: None,
                        rejected: None,
                    },
                });
            }
            Err(e) => return Err(e.into()),
        }
        let decision = self.decide(&view)?;
        Ok(Processed::Decided {
            context: view.context,
            decision,
        })
    }

    /// The three-way decision for one retrieved node: answer if confident,
    /// otherwise split if still above the depth cap, otherwise extract
    /// entity anchors.
    fn decide(&self, view: &NodeView) -> Result<Decision, EngineError> {
        let context = self.render_context(&view.context);
        let mut rejected = None;

        let attempt_prompt = self.prompts.render(
            TemplateRole::AnswerAttempt,
            &[
                ("query", view.query.as_str()),
                ("context", context.as_str()),
                ("parent_query", parent_or_none(&view.parent_query)),
            ],
        );
        match self.generate(&attempt_prompt) {
            Err(e) => return tolerate(e, rejected),
            Ok(result) => {
                if !result.text.contains(CANNOT_ANSWER) {
                    let span = extract_answer_span(&result, ANSWER_MARKER);
                    let text = span_text(span);
                    if !text.is_empty() {
                        let conf = confidence(span).expect("span is nonempty");
                        if conf >= self.cfg.tau_a {
                            return Ok(Decision {
                                outcome: Some(DecomposeOutcome::Answer {
                                    text,
                                    confidence: conf,
                                }),
                                rejected: None,
                            });
                        }
                        rejected = Some((text, conf));
                    }
                }
            }
        }

        if view.depth < self.cfg.max_depth {
            match self.try_lines(TemplateRole::Decompose, view, &context, CANNOT_DECOMPOSE) {
                Err(e) => return tolerate(e, rejected),
                Ok(LineReply::Sentinel) => {}
                Ok(LineReply::Malformed) => {
                    return Ok(Decision {
                        outcome: None,
                        rejected,
                    })
                }
                Ok(LineReply::Lines(sub_queries)) => {
                    return Ok(Decision {
                        outcome: Some(DecomposeOutcome::Split { sub_queries }),
                        rejected,
                    })
                }
            }
        }

        match self.try_lines(TemplateRole::EntityExtraction, view, &context, "") {
            Err(e) => tolerate(e, rejected),
            Ok(LineReply::Lines(entities)) => Ok(Decision {
                outcome: Some(DecomposeOutcome::Entities { entities }),
                rejected,
            }),
            Ok(LineReply::Sentinel) | Ok(LineReply::Malformed) => Ok(Decision {
                outcome: None,
                rejected,
            }),
        }
    }

    /// Prompts for a line list, retrying once with a format reminder when
    /// the reply parses empty, overflows the branching cap, or echoes the
    /// node's own question.
    fn try_lines(
        &self,
        role: TemplateRole,
        view: &NodeView,
        context: &str,
        sentinel: &str,
    ) -> Result<LineReply, LlmError> {
        let max_branching = self.cfg.max_branching.to_string();
        let prompt = self.prompts.render(
            role,
            &[
                ("query", view.query.as_str()),
                ("context", context),
                ("parent_query", parent_or_none(&view.parent_query)),
                ("max_branching", max_branching.as_str()),
            ],
        );
        for attempt in 0..2 {
            let full = if attempt == 0 {
                prompt.clone()
            } else {
                format!("{prompt}{REPROMPT_SUFFIX}")
            };
            let text = self.generate(&full)?.text;
            if !sentinel.is_empty() && text.contains(sentinel) {
                return Ok(LineReply::Sentinel);
            }
            let lines = parse_list(&text);
            let mut valid = !lines.is_empty() && lines.len() <= self.cfg.max_branching;
            if role == TemplateRole::Decompose {
                valid = valid && lines.iter().all(|l| l != &view.query);
            }
            if valid {
                return Ok(LineReply::Lines(lines));
            }
        }
        Ok(LineReply::Malformed)
    }

    /// Answer attempt for a node that popped after the retrieval cap was
    /// hit. Whatever comes back is accepted without a confidence gate; a
    /// refusal or failure leaves the node empty.
    fn forced_answer(&self, view: &NodeView) -> Result<Option<(String, f64)>, EngineError> {
        let context = self.render_context(&view.context);
        let prompt = self.prompts.render(
            TemplateRole::AnswerAttempt,
            &[
                ("query", view.query.as_str()),
                ("context", context.as_str()),
                ("parent_query", parent_or_none(&view.parent_query)),
            ],
        );
        let result = match self.generate(&prompt) {
            Ok(r) => r,
            Err(e @ LlmError::BackendUnavailable(_)) => return Err(e.into()),
            Err(_) => return Ok(None),
        };
        if result.text.contains(CANNOT_ANSWER) {
            return Ok(None);
        }
        let span = extract_answer_span(&result, ANSWER_MARKER);
        let text = span_text(span);
        if text.is_empty() {
            return Ok(None);
        }
        let conf = confidence(span).expect("span is nonempty");
        Ok(Some((text, conf)))
    }

    /// Bottom-up aggregation over a built tree: entity leaves summarize
    /// their evidence, query nodes combine their children, and the root's
    /// answer is returned. Children always carry larger ids than their
    /// parent, so one reverse id sweep resolves every node before it is
    /// needed.
    pub fn backtrace(&self, tree: &mut DecompositionTree) -> Result<String, EngineError> {
        for idx in (0..tree.len()).rev() {
            let id = NodeId(idx);
            match tree.node(id).kind {
                NodeKind::Answer => {}
                NodeKind::Entity => {
                    let node = tree.node(id);
                    let context = self.render_context(&node.context);
                    let prompt = self.prompts.render(
                        TemplateRole::EntitySummary,
                        &[
                            ("query", node.parent_query.as_str()),
                            ("context", context.as_str()),
                        ],
                    );
                    let text = self.generate(&prompt)?.text.trim().to_string();
                    tree.node_mut(id).answer = text;
                }
                NodeKind::Query => {
                    let node = tree.node(id);
                    if node.children.is_empty() {
                        continue;
                    }
                    let blocks: Vec<String> = node
                        .children
                        .iter()
                        .map(|&c| {
                            let child = tree.node(c);
                            let result = if child.answer.trim().is_empty() {
                                NO_EVIDENCE
                            } else {
                                child.answer.trim()
                            };
                            match child.kind {
                                NodeKind::Entity => {
                                    format!("Evidence ({}): {}", child.entities.join(", "), result)
                                }
                                _ => format!("Q: {}\nA: {}", child.query, result),
                            }
                        })
                        .collect();
                    let prompt = self.prompts.render(
                        TemplateRole::Aggregate,
                        &[
                            ("query", node.query.as_str()),
                            ("children", blocks.join("\n").as_str()),
                        ],
                    );
                    let result = self.generate(&prompt)?;
                    let text = if result.text.contains(ANSWER_MARKER) {
                        span_text(extract_answer_span(&result, ANSWER_MARKER))
                    } else {
                        result.text.trim().to_string()
                    };
                    tree.node_mut(id).answer = text;
                }
            }
        }
        Ok(tree.node(tree.root).answer.clone())
    }

    /// Numbered evidence block for prompt construction.
    fn render_context(&self, ids: &[String]) -> String {
        if ids.is_empty() {
            return "(no documents retrieved)".to_string();
        }
        ids.iter()
            .enumerate()
            .map(|(i, id)| match self.retriever.document(id) {
                Some(d) if d.title.is_empty() => format!("[{}] {}", i + 1, d.text),
                Some(d) => format!("[{}] {}: {}", i + 1, d.title, d.text),
                None => format!("[{}] (content unavailable)", i + 1),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, LlmError> {
        self.llm.generate(&GenerationRequest {
            prompt: prompt.to_string(),
            max_tokens: self.cfg.max_tokens as usize,
            stop_sequences: Vec::new(),
            deterministic: true,
        })
    }
}

/// Generation failures degrade to an empty node; only a dead backend stops
/// the whole run.
fn tolerate(e: LlmError, rejected: Option<(String, f64)>) -> Result<Decision, EngineError> {
    match e {
        LlmError::BackendUnavailable(_) => Err(e.into()),
        _ => Ok(Decision {
            outcome: None,
            rejected,
        }),
    }
}

fn parent_or_none(parent_query: &str) -> &str {
    if parent_query.is_empty() {
        "(none)"
    } else {
        parent_query
    }
}

/// Parses one-item-per-line model output, stripping common list prefixes
/// and dropping blanks and duplicates.
fn parse_list(text: &str) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    for raw in text.lines() {
        let line = strip_list_prefix(raw);
        if line.is_empty() {
            continue;
        }
        if !items.iter().any(|l| l == line) {
            items.push(line.to_string());
        }
    }
    items
}

fn strip_list_prefix(line: &str) -> &str {
    let t = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.starts_with(' ') {
                return r.trim();
            }
        }
    }
    t
}
