//! Engine configuration and validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Knobs controlling tree construction and generation.
///
/// `Default` matches the settings the engine is tuned for: binary branching,
/// depth three, a 0.95 acceptance threshold, top-5 retrieval, and a seven-call
/// retrieval budget per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Maximum sub-questions (or entity anchors) produced by one expansion.
    pub max_branching: usize,
    /// Maximum depth at which a query node may sit.
    pub max_depth: usize,
    /// Confidence threshold an answer must reach to be accepted.
    pub tau_a: f64,
    /// Documents returned per retrieval call.
    pub top_k: usize,
    /// Hard cap on retrieval calls per question.
    pub retrieval_cap: u32,
    /// Token budget per generation.
    pub max_tokens: u32,
    /// Prompt template bundle: `"default"` or a directory of template files.
    pub prompt_set: String,
    /// Upper bound on concurrently expanded frontier nodes.
    pub parallelism: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_branching: 2,
            max_depth: 3,
            tau_a: 0.95,
            top_k: 5,
            retrieval_cap: 7,
            max_tokens: 4096,
            prompt_set: "default".to_string(),
            parallelism: 1,
        }
    }
}

/// Rejection of a config value, naming the first field that failed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError {
            field,
            reason: reason.into(),
        }
    }
}

impl EngineConfig {
    /// Checks every field, reporting the first violation in declaration order.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_branching == 0 {
            return Err(ConfigError::new("max_branching", "must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(ConfigError::new("max_depth", "must be at least 1"));
        }
        if !self.tau_a.is_finite() || !(0.0..=1.0).contains(&self.tau_a) {
            return Err(ConfigError::new(
                "tau_a",
                format!("must be within [0, 1], got {}", self.tau_a),
            ));
        }
        if self.top_k == 0 {
            return Err(ConfigError::new("top_k", "must be at least 1"));
        }
        if self.retrieval_cap == 0 {
            return Err(ConfigError::new("retrieval_cap", "must be at least 1"));
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::new("max_tokens", "must be at least 1"));
        }
        if self.prompt_set.trim().is_empty() {
            return Err(ConfigError::new("prompt_set", "must not be empty"));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::new("parallelism", "must be at least 1"));
        }
        Ok(())
    }
}
