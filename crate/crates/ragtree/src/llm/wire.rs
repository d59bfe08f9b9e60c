//! HTTP backend speaking the completions protocol: POST a prompt, read back
//! text with aligned per-token log probabilities.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    validate_request, Gate, GenerationRequest, GenerationResult, LanguageModel, LlmError,
    TokenLogprob,
};

/// Connection settings for a completions endpoint.
#[derive(Debug, Clone)]
pub struct WireConfig {
    /// Service base URL; `/v1/completions` is appended unless the URL
    /// already ends with `/completions`.
    pub base_url: String,
    pub model: String,
    /// Bearer token; read from the environment by callers, never logged.
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Upper bound on concurrent requests to the backend.
    pub max_in_flight: usize,
}

impl WireConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        WireConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/completions")
        }
    }
}

#[derive(Serialize)]
struct CompletionsRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    logprobs: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    logprobs: Option<LogprobBlock>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct LogprobBlock {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
}

/// [`LanguageModel`] over a remote completions endpoint.
pub struct WireClient {
    cfg: WireConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl WireClient {
    pub fn new(cfg: WireConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        let gate = Gate::new(cfg.max_in_flight);
        WireClient { cfg, agent, gate }
    }

    pub fn config(&self) -> &WireConfig {
        &self.cfg
    }
}

impl LanguageModel for WireClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        validate_request(request)?;
        let body = CompletionsRequest {
            model: &self.cfg.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: if request.deterministic { 0.0 } else { 1.0 },
            logprobs: true,
            stop: request.stop_sequences.clone(),
        };

        let _slot = self.gate.acquire();
        let started = Instant::now();
        let mut req = self.agent.post(self.cfg.endpoint());
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => {
                LlmError::BackendUnavailable(format!("backend returned HTTP {code}"))
            }
            other => LlmError::BackendUnavailable(other.to_string()),
        })?;
        let parsed: CompletionsResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::ProtocolError(format!("malformed response body: {e}")))?;
        let latency = started.elapsed();

        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::ProtocolError("response carried no choices".into()))?;
        let block = choice
            .logprobs
            .ok_or_else(|| LlmError::ProtocolError("response is missing logprobs".into()))?;
        if block.tokens.len() != block.token_logprobs.len() {
            return Err(LlmError::ProtocolError(format!(
                "{} tokens but {} logprobs",
                block.tokens.len(),
                block.token_logprobs.len()
            )));
        }
        let reconstructed: String = block.tokens.concat();
        if reconstructed != choice.text {
            return Err(LlmError::ProtocolError(
                "tokens do not reconstruct the choice text".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(block.tokens.len());
        for (i, (text, lp)) in block
            .tokens
            .into_iter()
            .zip(block.token_logprobs)
            .enumerate()
        {
            let lp = lp.ok_or_else(|| LlmError::ProtocolError(format!("logprob {i} is null")))?;
            if !lp.is_finite() {
                return Err(LlmError::ProtocolError(format!(
                    "logprob {i} is not finite: {lp}"
                )));
            }
            // some backends report tiny positive values for near-certain tokens
            tokens.push(TokenLogprob {
                text,
                logprob: lp.min(0.0),
            });
        }
        Ok(GenerationResult {
            text: choice.text,
            tokens,
            latency,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}
