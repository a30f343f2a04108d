use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DomainError, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    /// Chat-completions style HTTP API (`/v1/chat/completions`).
    OpenAi,
    /// `generateContent` style HTTP API.
    Gemini,
    /// Answers from recorded fixtures keyed by prompt fingerprint.
    Replay,
}

impl Provider {
    /// Environment variable holding the credential for this provider.
    pub fn credential_env(self) -> Option<&'static str> {
        match self {
            Provider::OpenAi => Some("OPENAI_API_KEY"),
            Provider::Gemini => Some("GEMINI_API_KEY"),
            Provider::Replay => None,
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::OpenAi => "openai",
            Provider::Gemini => "gemini",
            Provider::Replay => "replay",
        })
    }
}

impl FromStr for Provider {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "openai" => Ok(Provider::OpenAi),
            "gemini" => Ok(Provider::Gemini),
            "replay" => Ok(Provider::Replay),
            other => Err(DomainError::Invalid(format!("unknown provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

/// Currency units per token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostRates {
    pub input_per_token: Rational,
    pub output_per_token: Rational,
}

/// A named model configuration. Stored in full with every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_config_id: String,
    pub provider: Provider,
    pub model_name: String,
    pub max_output_tokens: u32,
    pub request_timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cost_rates: CostRates,
    /// Sampling temperature sent to the provider; `None` leaves the
    /// provider default in place (some reasoning models reject the field).
    #[serde(default = "default_temperature")]
    pub temperature: Option<f64>,
    /// Overrides the provider's public endpoint.
    #[serde(default)]
    pub base_url: Option<String>,
}

fn default_temperature() -> Option<f64> {
    Some(0.0)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.model_config_id.trim().is_empty() {
            return Err(DomainError::Invalid("model_config_id is empty".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(DomainError::Invalid(format!(
                "model config {}: max_attempts must be at least 1",
                self.model_config_id
            )));
        }
        if self.request_timeout_ms == 0 {
            return Err(DomainError::Invalid(format!(
                "model config {}: request timeout must be positive",
                self.model_config_id
            )));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.retry.backoff_base_ms)
    }
}
