//! Scripted in-process backend for tests and offline runs.
//!
//! A script is a JSON array of rules; the first rule whose `contains`
//! needles all appear in the prompt wins. Exact prompt fingerprints
//! registered with [`MockLlm::with_response`] take precedence over rules.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use super::{
    validate_request, GenerationRequest, GenerationResult, LanguageModel, LlmError, TokenLogprob,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    #[serde(rename = "match", default)]
    matcher: Matcher,
    text: String,
    logprobs: Vec<f64>,
    #[serde(default)]
    truncated: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Matcher {
    #[serde(default)]
    contains: Vec<String>,
}

#[derive(Debug, Clone)]
struct Reply {
    tokens: Vec<TokenLogprob>,
    truncated: bool,
}

/// Deterministic scripted language model.
#[derive(Debug)]
pub struct MockLlm {
    exact: HashMap<String, Reply>,
    rules: Vec<(Vec<String>, Reply)>,
    fallback: Option<Reply>,
    calls: Mutex<Vec<String>>,
}

impl MockLlm {
    pub fn new() -> Self {
        MockLlm {
            exact: HashMap::new(),
            rules: Vec::new(),
            fallback: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_script_str(&text)
    }

    pub fn from_script_str(text: &str) -> Result<Self, LlmError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| LlmError::Script(e.to_string()))?;
        let mut llm = MockLlm::new();
        for (i, entry) in entries.into_iter().enumerate() {
            let reply = build_reply(&entry.text, &entry.logprobs, entry.truncated)
                .map_err(|e| LlmError::Script(format!("rule {i}: {e}")))?;
            llm.rules.push((entry.matcher.contains, reply));
        }
        Ok(llm)
    }

    /// Registers an exact reply for one prompt (compared after whitespace
    /// normalization). Overrides any matching rule.
    pub fn with_response(
        mut self,
        prompt: &str,
        text: &str,
        logprobs: &[f64],
    ) -> Result<Self, LlmError> {
        let reply = build_reply(text, logprobs, false).map_err(LlmError::Script)?;
        self.exact.insert(normalize_prompt(prompt), reply);
        Ok(self)
    }

    /// Appends a substring-match rule; earlier rules win.
    pub fn add_rule(
        &mut self,
        contains: &[&str],
        text: &str,
        logprobs: &[f64],
    ) -> Result<(), LlmError> {
        let reply = build_reply(text, logprobs, false).map_err(LlmError::Script)?;
        self.rules
            .push((contains.iter().map(|s| s.to_string()).collect(), reply));
        Ok(())
    }

    /// Sets a reply for prompts no rule matches.
    pub fn with_fallback(mut self, text: &str, logprobs: &[f64]) -> Result<Self, LlmError> {
        self.fallback = Some(build_reply(text, logprobs, false).map_err(LlmError::Script)?);
        Ok(self)
    }

    /// Number of generate calls served so far.
    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Normalized prompts of every call, in order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    fn resolve(&self, normalized: &str) -> Option<&Reply> {
        if let Some(reply) = self.exact.get(normalized) {
            return Some(reply);
        }
        for (needles, reply) in &self.rules {
            if needles.iter().all(|n| normalized.contains(n.as_str())) {
                return Some(reply);
            }
        }
        self.fallback.as_ref()
    }
}

impl Default for MockLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl LanguageModel for MockLlm {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        validate_request(request)?;
        let normalized = normalize_prompt(&request.prompt);
        self.calls.lock().unwrap().push(normalized.clone());
        let reply = self
            .resolve(&normalized)
            .ok_or_else(|| LlmError::UnmatchedPrompt(preview(&normalized)))?;
        Ok(GenerationResult {
            text: reply.tokens.iter().map(|t| t.text.as_str()).collect(),
            tokens: reply.tokens.clone(),
            latency: Duration::ZERO,
            truncated: reply.truncated,
        })
    }
}

/// Collapses runs of whitespace so prompt matching is insensitive to
/// template line wrapping.
fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn preview(prompt: &str) -> String {
    const LIMIT: usize = 160;
    if prompt.chars().count() <= LIMIT {
        prompt.to_string()
    } else {
        let head: String = prompt.chars().take(LIMIT).collect();
        format!("{head}...")
    }
}

fn build_reply(text: &str, logprobs: &[f64], truncated: bool) -> Result<Reply, String> {
    for &lp in logprobs {
        if !lp.is_finite() || lp > 0.0 {
            return Err(format!("logprob {lp} must be finite and non-positive"));
        }
    }
    let pieces = tokenize_reply(text);
    let per_token: Vec<f64> = if logprobs.len() == 1 {
        vec![logprobs[0]; pieces.len()]
    } else if logprobs.len() == pieces.len() {
        logprobs.to_vec()
    } else {
        return Err(format!(
            "{} logprobs for {} tokens; give exactly one (broadcast) or one per token",
            logprobs.len(),
            pieces.len()
        ));
    };
    Ok(Reply {
        tokens: pieces
            .into_iter()
            .zip(per_token)
            .map(|(text, logprob)| TokenLogprob { text, logprob })
            .collect(),
        truncated,
    })
}

/// Splits text into word tokens that keep their leading whitespace, the way
/// byte-pair vocabularies usually segment prose. Trailing whitespace joins
/// the final token.
fn tokenize_reply(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut has_content = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if has_content {
                tokens.push(std::mem::take(&mut current));
                has_content = false;
            }
            current.push(ch);
        } else {
            current.push(ch);
            has_content = true;
        }
    }
    if !current.is_empty() {
        if has_content {
            tokens.push(current);
        } else if let Some(last) = tokens.last_mut() {
            last.push_str(&current);
        } else {
            tokens.push(current);
        }
    }
    tokens
}
