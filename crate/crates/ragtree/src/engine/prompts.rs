//! Prompt templates for the five generation roles, with an overridable
//! on-disk set.
//!
//! Each role renders from a plain-text template with `{placeholder}`
//! substitution. A directory can override any subset of the built-in
//! templates; missing files fall back to the defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Reply a model gives when the evidence cannot support an answer.
pub const CANNOT_ANSWER: &str = "CANNOT_ANSWER";
/// Reply a model gives when a question does not split into sub-questions.
pub const CANNOT_DECOMPOSE: &str = "CANNOT_DECOMPOSE";
/// Stand-in for a child whose branch produced no usable result.
pub const NO_EVIDENCE: &str = "NO_EVIDENCE";

/// The five generation roles the engine prompts for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateRole {
    /// Try to answer a question from retrieved context.
    AnswerAttempt,
    /// Split a question into sub-questions.
    Decompose,
    /// Pull entity anchors out of a question.
    EntityExtraction,
    /// Summarize evidence retrieved for entity anchors.
    EntitySummary,
    /// Combine child findings into the parent's answer.
    Aggregate,
}

impl TemplateRole {
    pub const ALL: [TemplateRole; 5] = [
        TemplateRole::AnswerAttempt,
        TemplateRole::Decompose,
        TemplateRole::EntityExtraction,
        TemplateRole::EntitySummary,
        TemplateRole::Aggregate,
    ];

    /// File name a directory override uses for this role.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateRole::AnswerAttempt => "answer_attempt.txt",
            TemplateRole::Decompose => "decompose.txt",
            TemplateRole::EntityExtraction => "entity_extraction.txt",
            TemplateRole::EntitySummary => "entity_summary.txt",
            TemplateRole::Aggregate => "aggregate.txt",
        }
    }

    /// Placeholders the template must reference for the engine to work.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateRole::AnswerAttempt => &["query", "context"],
            TemplateRole::Decompose => &["query", "context"],
            TemplateRole::EntityExtraction => &["query"],
            TemplateRole::EntitySummary => &["query", "context"],
            TemplateRole::Aggregate => &["query", "children"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateRole::AnswerAttempt => DEFAULT_ANSWER_ATTEMPT,
            TemplateRole::Decompose => DEFAULT_DECOMPOSE,
            TemplateRole::EntityExtraction => DEFAULT_ENTITY_EXTRACTION,
            TemplateRole::EntitySummary => DEFAULT_ENTITY_SUMMARY,
            TemplateRole::Aggregate => DEFAULT_AGGREGATE,
        }
    }
}

const DEFAULT_ANSWER_ATTEMPT: &str = "You answer questions strictly from the evidence below. If the evidence is sufficient, reply with a single line of the form `Answer: <short answer>`. If it is not sufficient, reply with exactly CANNOT_ANSWER.

Broader question: {parent_query}

Evidence:
{context}

Question: {query}
";

const DEFAULT_DECOMPOSE: &str = "Decide whether the question below can be broken into at most {max_branching} simpler sub-questions that can each be answered independently from one or two documents. If it can, reply with one sub-question per line and nothing else. If it cannot, reply with exactly CANNOT_DECOMPOSE.

Broader question: {parent_query}

Evidence:
{context}

Question: {query}
";

const DEFAULT_ENTITY_EXTRACTION: &str = "Extract up to {max_branching} named entities from the question below that would make good search anchors, one per line, most specific first. Reply with the entity names and nothing else.

Broader question: {parent_query}

Question: {query}
";

const DEFAULT_ENTITY_SUMMARY: &str = "Summarize the evidence below in one or two sentences, keeping only facts relevant to the question. If nothing is relevant, say so in one sentence.

Question: {query}

Evidence:
{context}
";

const DEFAULT_AGGREGATE: &str = "Combine the findings below into a final answer to the question. Reply with a single line of the form `Answer: <short answer>`.

Question: {query}

Findings:
{children}
";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}` never references {{{placeholder}}}")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("prompt set `{0}` is neither `default` nor a directory")]
    UnknownSet(String),
}

/// A full set of templates, one per role.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateRole, String>,
}

impl PromptSet {
    /// The built-in templates.
    pub fn default_set() -> Self {
        let templates = TemplateRole::ALL
            .iter()
            .map(|&role| (role, role.default_text().to_string()))
            .collect();
        PromptSet { templates }
    }

    /// Loads overrides from a directory; roles without an override file keep
    /// the built-in template.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let mut set = PromptSet::default_set();
        for role in TemplateRole::ALL {
            let path = dir.as_ref().join(role.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path, source })?;
                set.templates.insert(role, text);
            }
        }
        set.validate()?;
        Ok(set)
    }

    /// Resolves a prompt-set name: `default` gives the built-ins, anything
    /// else must be a template directory.
    pub fn resolve(name: &str) -> Result<Self, PromptError> {
        if name == "default" {
            return Ok(PromptSet::default_set());
        }
        let path = Path::new(name);
        if path.is_dir() {
            PromptSet::from_dir(path)
        } else {
            Err(PromptError::UnknownSet(name.to_string()))
        }
    }

    /// Checks that every template references its required placeholders.
    pub fn validate(&self) -> Result<(), PromptError> {
        for (&role, text) in &self.templates {
            for &placeholder in role.required_placeholders() {
                if !text.contains(&format!("{{{placeholder}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        template: role.file_name(),
                        placeholder,
                    });
                }
            }
        }
        Ok(())
    }

    /// Renders a role's template, substituting every `{key}` present in
    /// `vars`. Unknown braces in the template are left as-is.
    pub fn render(&self, role: TemplateRole, vars: &[(&str, &str)]) -> String {
        let mut text = self.templates[&role].clone();
        for (key, value) in vars {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        text
    }
}
