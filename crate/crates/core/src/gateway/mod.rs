//! Completion backends and the retrying gateway in front of them.
//!
//! The gateway enforces the token budget before any backend call, retries
//! transient failures with jittered exponential backoff, and caps in-flight
//! requests. Backends are either the live chat-completion client or the
//! deterministic [`mock::MockBackend`].

mod batch;
pub mod live;
pub mod mock;
pub mod parse;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::{Generation, TokenUsage};
use crate::prompt::{estimate_tokens, PromptText};

pub use batch::{score_batch, BatchError, FailureKind, ScoringFailure, ScoringRun};
pub use parse::{parse_generation, ParseError, ParseFlag, ParsedOutput, ParsedScore};

/// Environment variable holding the live backend's API key.
pub const API_KEY_ENV: &str = "RUBRIC_LOOP_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Mock,
}

fn default_temperature() -> f64 {
    0.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_inflight() -> usize {
    4
}
fn default_budget() -> usize {
    8000
}
fn default_base_url() -> String {
    "https://api.openai.com/v1".to_string()
}
fn default_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_ms: u64,
}

impl GatewayConfig {
    pub fn mock() -> Self {
        Self {
            backend: BackendKind::Mock,
            model_id: "mock".to_string(),
            temperature: default_temperature(),
            max_retries: default_retries(),
            backoff_base_ms: 0,
            max_inflight: default_inflight(),
            token_budget: default_budget(),
            base_url: default_base_url(),
            request_timeout_ms: default_timeout(),
        }
    }

    pub fn live(model_id: impl Into<String>) -> Self {
        Self {
            backend: BackendKind::Live,
            model_id: model_id.into(),
            backoff_base_ms: default_backoff(),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidConfig { reason: format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )});
        }
        if self.max_inflight == 0 {
            return Err(GatewayError::InvalidConfig { reason: "max_inflight must be >= 1".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: PromptText,
    pub model_id: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

/// Failure reported by a backend, classified for the retry policy.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Timeouts, connection failures, 429 and 5xx.
    #[error("transient failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transient { status: Option<u16>, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    /// The provider answered but will not complete this request.
    #[error("backend refused the request: {0}")]
    Refusal(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("prompt needs about {estimate} tokens, budget is {budget}")]
    BudgetExceeded { estimate: usize, budget: usize },
    #[error("authentication failed: {message}")]
    AuthFailure { message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    TransientExhausted { attempts: u32, last: String },
    #[error("backend refused the request: {message}")]
    BackendRefusal { message: String },
    #[error("invalid gateway configuration: {reason}")]
    InvalidConfig { reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub retries: u64,
    pub completions: u64,
    pub failures: u64,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: GatewayConfig,
    permits: Semaphore,
    stats: Mutex<GatewayStats>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            backend,
            permits: Semaphore::new(config.max_inflight),
            config,
            stats: Mutex::new(GatewayStats::default()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn stats(&self) -> GatewayStats {
        *self.stats.lock().expect("stats lock poisoned")
    }

    fn bump(&self, f: impl FnOnce(&mut GatewayStats)) {
        f(&mut self.stats.lock().expect("stats lock poisoned"));
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(retry as i32);
        let jitter = rand::thread_rng().gen_range(0.8..=1.2);
        Duration::from_millis((base * jitter).round() as u64)
    }

    /// Sends one prompt, retrying transient failures up to `max_retries` times.
    pub async fn complete(&self, prompt: &PromptText) -> Result<Generation, GatewayError> {
        let estimate = estimate_tokens(prompt.as_str());
        if estimate > self.config.token_budget {
            return Err(GatewayError::BudgetExceeded {
                estimate,
                budget: self.config.token_budget,
            });
        }
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let request = CompletionRequest {
            prompt: prompt.clone(),
            model_id: self.config.model_id.clone(),
            temperature: self.config.temperature,
        };
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.bump(|s| s.requests += 1);
            match self.backend.complete(&request).await {
                Ok(reply) => {
                    self.bump(|s| s.completions += 1);
                    let usage = reply.usage.unwrap_or(TokenUsage {
                        prompt: estimate as u32,
                        completion: estimate_tokens(&reply.text) as u32,
                    });
                    return Ok(Generation {
                        prompt_hash: prompt.digest(),
                        raw_text: reply.text,
                        model_id: self.config.model_id.clone(),
                        // mock replies are instant; a fixed 0 keeps their records reproducible
                        latency_ms: match self.config.backend {
                            BackendKind::Mock => 0,
                            BackendKind::Live => started.elapsed().as_millis() as u64,
                        },
                        token_usage: usage,
                        attempts: attempt,
                    });
                }
                Err(BackendError::Transient { status, message }) => {
                    if attempt > self.config.max_retries {
                        self.bump(|s| s.failures += 1);
                        let last = BackendError::Transient { status, message }.to_string();
                        return Err(GatewayError::TransientExhausted { attempts: attempt, last });
                    }
                    self.bump(|s| s.retries += 1);
                    let delay = self.backoff(attempt - 1);
                    tracing::debug!(attempt, ?delay, %message, "transient backend failure, retrying");
                    tokio::time::sleep(delay).await;
                }
                Err(BackendError::Auth(message)) => {
                    self.bump(|s| s.failures += 1);
                    return Err(GatewayError::AuthFailure { message });
                }
                Err(BackendError::Refusal(message)) => {
                    self.bump(|s| s.failures += 1);
                    return Err(GatewayError::BackendRefusal { message });
                }
            }
        }
    }
}
