//! Uniform access to vision-capable model providers.
//!
//! A [`ModelProvider`] performs one attempt; [`Gateway::invoke`] wraps it with
//! the config's retry policy. Only transport-level failures (timeouts,
//! connection errors, rate limiting, 5xx) are retried. Whatever text the
//! model returns is passed through untouched for the parser to judge.

mod http;
mod replay;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::domain::{ModelConfig, Provider, Rational, TokenUsage};
use crate::prompt::PromptBundle;

pub use http::{GeminiProvider, OpenAiProvider};
pub use replay::{Fixture, FixtureStore, RecordingProvider, ReplayProvider};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawModelResponse {
    pub body: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub attempts_used: u32,
    pub provider_echo: String,
}

/// One successful provider round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub body: String,
    pub usage: TokenUsage,
    pub provider_echo: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Connection trouble, rate limiting, server errors. Retried.
    Transient,
    /// The request exceeded its timeout. Retried.
    Timeout,
    Auth,
    /// The provider rejected the request itself. Not retried.
    Fatal,
    FixtureMissing,
}

impl FailureKind {
    fn retryable(self) -> bool {
        matches!(self, FailureKind::Transient | FailureKind::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderFailure {
    pub kind: FailureKind,
    pub detail: String,
}

impl ProviderFailure {
    pub fn new(kind: FailureKind, detail: impl Into<String>) -> Self {
        ProviderFailure {
            kind,
            detail: detail.into(),
        }
    }
}

pub trait ModelProvider: Send + Sync {
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure>;
}

/// Resolves image digests in a bundle to bytes.
pub trait BlobSource: Send + Sync {
    fn read_blob(&self, digest: &str) -> Result<Vec<u8>, String>;
}

impl BlobSource for crate::store::Store {
    fn read_blob(&self, digest: &str) -> Result<Vec<u8>, String> {
        self.get_blob(digest).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("no fixture for prompt {fingerprint} under model config {model_config_id}")]
    FixtureMissing {
        fingerprint: String,
        model_config_id: String,
    },
    #[error("gave up after {attempts} attempts: {detail}")]
    TimeoutExhausted { attempts: u32, detail: String },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("provider error: {0}")]
    ProviderError(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

impl GatewayError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::FixtureMissing { .. } => "fixture-missing",
            GatewayError::TimeoutExhausted { .. } => "timeout-exhausted",
            GatewayError::AuthFailure(_) => "auth-failure",
            GatewayError::ProviderError(_) => "non-transient-provider-error",
            GatewayError::InvalidConfig(_) => "invalid-config",
        }
    }
}

/// A provider backed by a closure; handy for simulations and tests.
pub struct FnProvider<F>(pub F);

impl<F> ModelProvider for FnProvider<F>
where
    F: Fn(&PromptBundle, &ModelConfig) -> Result<ProviderReply, ProviderFailure> + Send + Sync,
{
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure> {
        (self.0)(bundle, config)
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ModelProvider>,
    sleep: Sleeper,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ModelProvider>) -> Self {
        Gateway {
            provider,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the backoff sleep, e.g. with a no-op in tests.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn invoke(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<RawModelResponse, GatewayError> {
        config
            .validate()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let started = Instant::now();
        let max = config.retry.max_attempts;
        let mut attempt = 1;
        loop {
            match self.provider.complete(bundle, config) {
                Ok(reply) => {
                    return Ok(RawModelResponse {
                        body: reply.body,
                        usage: reply.usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts_used: attempt,
                        provider_echo: reply.provider_echo,
                    })
                }
                Err(failure) if failure.kind.retryable() && attempt < max => {
                    tracing::warn!(attempt, detail = %failure.detail, "transient provider failure, retrying");
                    (self.sleep)(backoff(config.backoff_base(), attempt));
                    attempt += 1;
                }
                Err(failure) => {
                    return Err(match failure.kind {
                        FailureKind::Transient | FailureKind::Timeout => GatewayError::TimeoutExhausted {
                            attempts: attempt,
                            detail: failure.detail,
                        },
                        FailureKind::Auth => GatewayError::AuthFailure(failure.detail),
                        FailureKind::Fatal => GatewayError::ProviderError(failure.detail),
                        FailureKind::FixtureMissing => GatewayError::FixtureMissing {
                            fingerprint: bundle.fingerprint.clone(),
                            model_config_id: config.model_config_id.clone(),
                        },
                    })
                }
            }
        }
    }
}

/// `base * 2^(attempt - 1)`, capped at 64x base.
fn backoff(base: Duration, attempt: u32) -> Duration {
    base.saturating_mul(1u32 << (attempt - 1).min(6))
}

/// Builds the live provider for a config. Credentials come from the
/// environment and are never written anywhere.
pub fn live_provider(config: &ModelConfig, blobs: Arc<dyn BlobSource>) -> Result<Arc<dyn ModelProvider>, GatewayError> {
    let credential = |var: &str| {
        std::env::var(var)
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| GatewayError::AuthFailure(format!("{var} is not set")))
    };
    match config.provider {
        Provider::OpenAi => Ok(Arc::new(OpenAiProvider::new(credential("OPENAI_API_KEY")?, blobs))),
        Provider::Gemini => Ok(Arc::new(GeminiProvider::new(credential("GEMINI_API_KEY")?, blobs))),
        Provider::Replay => Err(GatewayError::InvalidConfig(
            "replay provider needs a fixtures directory".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: Rational,
}

pub fn accumulate_usage(responses: &[RawModelResponse], config: &ModelConfig) -> CostSummary {
    let input_tokens: u64 = responses.iter().map(|r| r.usage.input_tokens).sum();
    let output_tokens: u64 = responses.iter().map(|r| r.usage.output_tokens).sum();
    let cost = Rational::integer(input_tokens as i64) * config.cost_rates.input_per_token.clone()
        + Rational::integer(output_tokens as i64) * config.cost_rates.output_per_token.clone();
    CostSummary {
        calls: responses.len(),
        input_tokens,
        output_tokens,
        cost,
    }
}
