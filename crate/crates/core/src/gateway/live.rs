//! Chat-completion client for OpenAI-compatible endpoints.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, CompletionRequest, GatewayConfig, API_KEY_ENV};
use crate::model::TokenUsage;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

pub struct LiveBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl LiveBackend {
    pub fn new(config: &GatewayConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build()
            .map_err(|e| BackendError::Refusal(format!("could not build HTTP client: {e}")))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
        })
    }

    /// Reads the key from `RUBRIC_LOOP_API_KEY`.
    pub fn from_env(config: &GatewayConfig) -> Result<Self, BackendError> {
        Self::new(config, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }
}

fn classify_status(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::Auth(body),
        408 | 429 | 500..=599 => BackendError::Transient {
            status: Some(status),
            message: body,
        },
        _ => BackendError::Refusal(format!("HTTP {status}: {body}")),
    }
}

#[async_trait]
impl Backend for LiveBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| BackendError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let body = ChatRequest {
            model: &request.model_id,
            temperature: request.temperature,
            messages: [ChatMessage {
                role: "user",
                content: request.prompt.as_str(),
            }],
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(key)
            .json(&body)
            .send()
            .await
            .map_err(|e| BackendError::Transient {
                status: None,
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        if !response.status().is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(classify_status(status, text));
        }
        let parsed: ChatResponse = response.json().await.map_err(|e| BackendError::Transient {
            status: Some(status),
            message: format!("unreadable response body: {e}"),
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Refusal("response has no choices".into()))?;
        if let Some(refusal) = choice.message.refusal {
            return Err(BackendError::Refusal(refusal));
        }
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(BackendError::Refusal("content filtered".into()));
        }
        let text = choice
            .message
            .content
            .ok_or_else(|| BackendError::Refusal("response has no content".into()))?;
        Ok(BackendReply {
            text,
            usage: parsed.usage.map(|u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            }),
        })
    }
}
