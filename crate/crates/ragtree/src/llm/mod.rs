//! Language-model abstraction: generation requests with per-token log
//! probabilities, answer-span extraction, and the confidence score used to
//! accept or reject candidate answers.

pub mod mock;
pub mod wire;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

pub use mock::MockLlm;
pub use wire::{WireClient, WireConfig};

/// Marker an answer-producing prompt asks the model to emit before the final
/// answer text.
pub const ANSWER_MARKER: &str = "Answer:";

/// One completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    /// Greedy decoding; the mock backend is always deterministic.
    pub deterministic: bool,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens: 4096,
            stop_sequences: Vec::new(),
            deterministic: true,
        }
    }
}

/// One generated token with its log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogprob {
    pub text: String,
    pub logprob: f64,
}

/// One completion: the full text, its tokens, and timing.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
    pub latency: Duration,
    /// True when generation stopped at the token limit.
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("max_tokens must be at least 1")]
    InvalidMaxTokens,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol violation: {0}")]
    ProtocolError(String),
    #[error("cannot score an empty answer span")]
    EmptyAnswer,
    #[error("no scripted response matches prompt: {0}")]
    UnmatchedPrompt(String),
    #[error("invalid response script: {0}")]
    Script(String),
}

/// A text-completion backend that reports per-token log probabilities.
pub trait LanguageModel: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError>;
}

pub(crate) fn validate_request(request: &GenerationRequest) -> Result<(), LlmError> {
    if request.prompt.is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    if request.max_tokens == 0 {
        return Err(LlmError::InvalidMaxTokens);
    }
    Ok(())
}

/// Confidence of an answer span: the exponential of the mean token log
/// probability, i.e. the geometric mean of the token probabilities.
pub fn confidence(span: &[TokenLogprob]) -> Result<f64, LlmError> {
    let logprobs: Vec<f64> = span.iter().map(|t| t.logprob).collect();
    confidence_from_logprobs(&logprobs)
}

/// [`confidence`] over raw log probabilities.
pub fn confidence_from_logprobs(logprobs: &[f64]) -> Result<f64, LlmError> {
    if logprobs.is_empty() {
        return Err(LlmError::EmptyAnswer);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(mean.exp())
}

/// Tokens of the answer span: everything at or after the end of the final
/// occurrence of `marker` in the generated text. Without a marker the whole
/// generation is the span.
pub fn extract_answer_span<'a>(result: &'a GenerationResult, marker: &str) -> &'a [TokenLogprob] {
    if marker.is_empty() {
        return &result.tokens;
    }
    let Some(pos) = result.text.rfind(marker) else {
        return &result.tokens;
    };
    let span_start = pos + marker.len();
    let mut offset = 0usize;
    for (i, token) in result.tokens.iter().enumerate() {
        if offset >= span_start {
            return &result.tokens[i..];
        }
        offset += token.text.len();
    }
    &[]
}

/// Concatenated, trimmed text of a token span.
pub fn span_text(span: &[TokenLogprob]) -> String {
    let joined: String = span.iter().map(|t| t.text.as_str()).collect();
    joined.trim().to_string()
}

/// Counting semaphore bounding concurrent backend requests.
pub(crate) struct Gate {
    state: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Gate {
    pub(crate) fn new(limit: usize) -> Self {
        Gate {
            state: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    pub(crate) fn acquire(&self) -> GateGuard<'_> {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.limit {
            in_flight = self.freed.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        GateGuard { gate: self }
    }
}

pub(crate) struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.gate.state.lock().unwrap();
        *in_flight -= 1;
        self.gate.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(logprobs: &[f64]) -> Vec<TokenLogprob> {
        logprobs
            .iter()
            .map(|&lp| TokenLogprob {
                text: "x".to_string(),
                logprob: lp,
            })
            .collect()
    }

    #[test]
    fn test_confidence_of_certain_tokens_is_one() {
        assert_eq!(confidence(&toks(&[0.0])).unwrap(), 1.0);
        assert_eq!(confidence(&toks(&[0.0, 0.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn test_confidence_equals_geometric_mean() {
        let lp = (0.5f64).ln();
        let got = confidence(&toks(&[lp, lp, lp])).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");

        let got = confidence(&toks(&[-0.1, -0.2, -0.3])).unwrap();
        assert!((got - (-0.2f64).exp()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn test_confidence_rejects_empty_span() {
        assert!(matches!(confidence(&[]), Err(LlmError::EmptyAnswer)));
    }

    fn result_from(text: &str, pieces: &[&str]) -> GenerationResult {
        assert_eq!(pieces.concat(), text);
        GenerationResult {
            text: text.to_string(),
            tokens: pieces
                .iter()
                .map(|p| TokenLogprob {
                    text: p.to_string(),
                    logprob: -0.1,
                })
                .collect(),
            latency: Duration::ZERO,
            truncated: false,
        }
    }

    #[test]
    fn test_answer_span_follows_final_marker() {
        let r = result_from(
            "Reasoning first. Answer: Paris",
            &["Reasoning", " first.", " Answer:", " Paris"],
        );
        let span = extract_answer_span(&r, ANSWER_MARKER);
        assert_eq!(span_text(span), "Paris");
        assert_eq!(span.len(), 1);
    }

    #[test]
    fn test_answer_span_ignores_earlier_markers() {
        let r = result_from(
            "Answer: draft Answer: final",
            &["Answer:", " draft", " Answer:", " final"],
        );
        assert_eq!(span_text(extract_answer_span(&r, ANSWER_MARKER)), "final");
    }

    #[test]
    fn test_answer_span_without_marker_is_whole_text() {
        let r = result_from("plain reply", &["plain", " reply"]);
        assert_eq!(extract_answer_span(&r, ANSWER_MARKER).len(), 2);
        assert_eq!(
            span_text(extract_answer_span(&r, ANSWER_MARKER)),
            "plain reply"
        );
    }

    #[test]
    fn test_answer_span_empty_after_trailing_marker() {
        let r = result_from("no luck Answer:", &["no", " luck", " Answer:"]);
        assert!(extract_answer_span(&r, ANSWER_MARKER).is_empty());
    }

    #[test]
    fn test_answer_span_splits_mid_token_boundary() {
        // marker ends inside the stream between tokens that carry
        // leading whitespace; the span starts at the first token whose
        // start offset reaches the text after the marker
        let r = result_from("Answer:  two  words", &["Answer:", "  two", "  words"]);
        assert_eq!(
            span_text(extract_answer_span(&r, ANSWER_MARKER)),
            "two  words"
        );
    }

    #[test]
    fn test_gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;

        let gate = Arc::new(Gate::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let gate = Arc::clone(&gate);
                let live = Arc::clone(&live);
                let peak = Arc::clone(&peak);
                scope.spawn(move || {
                    let _guard = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    proptest! {
        #[test]
        fn prop_confidence_in_unit_interval(lps in proptest::collection::vec(-10.0f64..=0.0, 1..64)) {
            let c = confidence_from_logprobs(&lps).unwrap();
            prop_assert!(c > 0.0 && c <= 1.0, "confidence {c} outside (0, 1]");
        }

        #[test]
        fn prop_confidence_is_permutation_invariant(
            lps in proptest::collection::vec(-10.0f64..=0.0, 1..32),
            seed in any::<u64>(),
        ) {
            let mut shuffled = lps.clone();
            // deterministic Fisher-Yates from the seed
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let a = confidence_from_logprobs(&lps).unwrap();
            let b = confidence_from_logprobs(&shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn prop_confidence_strictly_increases_with_any_token(
            lps in proptest::collection::vec(-10.0f64..=-0.5, 1..32),
            idx in any::<prop::sample::Index>(),
        ) {
            let mut improved = lps.clone();
            let i = idx.index(improved.len());
            improved[i] += 0.01;
            let before = confidence_from_logprobs(&lps).unwrap();
            let after = confidence_from_logprobs(&improved).unwrap();
            prop_assert!(after > before, "{after} not above {before}");
        }

        #[test]
        fn prop_confidence_of_constant_span_ignores_length(
            lp in -10.0f64..=0.0,
            n in 1usize..64,
            m in 1usize..64,
        ) {
            let a = confidence_from_logprobs(&vec![lp; n]).unwrap();
            let b = confidence_from_logprobs(&vec![lp; m]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
