//! Live HTTP providers.

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BlobSource, FailureKind, ModelProvider, ProviderFailure, ProviderReply};
use crate::domain::{ModelConfig, TokenUsage};
use crate::prompt::{PromptBundle, PromptPart};

const OPENAI_BASE: &str = "https://api.openai.com";
const GEMINI_BASE: &str = "https://generativelanguage.googleapis.com";

fn classify_status(status: StatusCode, body: &str) -> ProviderFailure {
    let detail = format!("HTTP {}: {}", status.as_u16(), truncate(body, 300));
    let kind = match status.as_u16() {
        401 | 403 => FailureKind::Auth,
        408 | 409 | 425 | 429 => FailureKind::Transient,
        s if s >= 500 => FailureKind::Transient,
        _ => FailureKind::Fatal,
    };
    ProviderFailure::new(kind, detail)
}

fn classify_transport(err: reqwest::Error) -> ProviderFailure {
    let kind = if err.is_timeout() {
        FailureKind::Timeout
    } else if err.is_connect() || err.is_request() || err.is_body() {
        FailureKind::Transient
    } else {
        FailureKind::Fatal
    };
    ProviderFailure::new(kind, err.to_string())
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn read_json(response: Response) -> Result<Value, ProviderFailure> {
    let status = response.status();
    let text = response.text().map_err(classify_transport)?;
    if !status.is_success() {
        return Err(classify_status(status, &text));
    }
    serde_json::from_str(&text)
        .map_err(|e| ProviderFailure::new(FailureKind::Fatal, format!("unreadable response envelope: {e}")))
}

fn image_data(blobs: &dyn BlobSource, digest: &str) -> Result<String, ProviderFailure> {
    let bytes = blobs
        .read_blob(digest)
        .map_err(|e| ProviderFailure::new(FailureKind::Fatal, format!("image {digest}: {e}")))?;
    Ok(BASE64.encode(bytes))
}

fn base_url<'a>(config: &'a ModelConfig, default: &'a str) -> &'a str {
    config.base_url.as_deref().unwrap_or(default).trim_end_matches('/')
}

/// Chat-completions style endpoint.
pub struct OpenAiProvider {
    client: Client,
    api_key: String,
    blobs: Arc<dyn BlobSource>,
}

impl OpenAiProvider {
    pub fn new(api_key: String, blobs: Arc<dyn BlobSource>) -> Self {
        OpenAiProvider {
            client: Client::new(),
            api_key,
            blobs,
        }
    }

    fn request_body(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<Value, ProviderFailure> {
        let mut content = Vec::new();
        for part in &bundle.user_parts {
            match part {
                PromptPart::Text { text } => content.push(json!({"type": "text", "text": text})),
                PromptPart::Image { blob, media_type } => {
                    let data = image_data(self.blobs.as_ref(), blob)?;
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{media_type};base64,{data}"), "detail": "high"}
                    }));
                }
            }
        }
        let mut body = json!({
            "model": config.model_name,
            "max_completion_tokens": config.max_output_tokens,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": content}
            ]
        });
        if let Some(t) = config.temperature {
            body["temperature"] = json!(t);
        }
        Ok(body)
    }
}

impl ModelProvider for OpenAiProvider {
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure> {
        let body = self.request_body(bundle, config)?;
        let url = format!("{}/v1/chat/completions", base_url(config, OPENAI_BASE));
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .timeout(config.request_timeout())
            .json(&body)
            .send()
            .map_err(classify_transport)?;
        let envelope = read_json(response)?;
        let text = envelope["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(ProviderReply {
            body: text,
            usage: TokenUsage {
                input_tokens: envelope["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                output_tokens: envelope["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            },
            provider_echo: format!(
                "{} {}",
                envelope["id"].as_str().unwrap_or("-"),
                envelope["model"].as_str().unwrap_or("-")
            ),
        })
    }
}

/// `models/{model}:generateContent` endpoint.
pub struct GeminiProvider {
    client: Client,
    api_key: String,
    blobs: Arc<dyn BlobSource>,
}

impl GeminiProvider {
    pub fn new(api_key: String, blobs: Arc<dyn BlobSource>) -> Self {
        GeminiProvider {
            client: Client::new(),
            api_key,
            blobs,
        }
    }

    fn request_body(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<Value, ProviderFailure> {
        let mut parts = Vec::new();
        for part in &bundle.user_parts {
            match part {
                PromptPart::Text { text } => parts.push(json!({"text": text})),
                PromptPart::Image { blob, media_type } => {
                    let data = image_data(self.blobs.as_ref(), blob)?;
                    parts.push(json!({"inlineData": {"mimeType": media_type, "data": data}}));
                }
            }
        }
        let mut generation = json!({
            "maxOutputTokens": config.max_output_tokens,
            "responseMimeType": "application/json"
        });
        if let Some(t) = config.temperature {
            generation["temperature"] = json!(t);
        }
        Ok(json!({
            "systemInstruction": {"parts": [{"text": bundle.system_text}]},
            "contents": [{"role": "user", "parts": parts}],
            "generationConfig": generation
        }))
    }
}

impl ModelProvider for GeminiProvider {
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure> {
        let body = self.request_body(bundle, config)?;
        let url = format!(
            "{}/v1beta/models/{}:generateContent",
            base_url(config, GEMINI_BASE),
            config.model_name
        );
        let response = self
            .client
            .post(url)
            .header("x-goog-api-key", &self.api_key)
            .timeout(config.request_timeout())
            .json(&body)
            .send()
            .map_err(classify_transport)?;
        let envelope = read_json(response)?;
        let text: String = envelope["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect())
            .unwrap_or_default();
        Ok(ProviderReply {
            body: text,
            usage: TokenUsage {
                input_tokens: envelope["usageMetadata"]["promptTokenCount"].as_u64().unwrap_or(0),
                output_tokens: envelope["usageMetadata"]["candidatesTokenCount"].as_u64().unwrap_or(0),
            },
            provider_echo: format!(
                "{} {}",
                envelope["responseId"].as_str().unwrap_or("-"),
                envelope["modelVersion"].as_str().unwrap_or("-")
            ),
        })
    }
}
