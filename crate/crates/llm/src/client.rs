//! OpenAI-compatible chat-completions and embeddings client.

use std::future::Future;
use std::time::{Duration, Instant};

use ifclust_core::baselines::EmbeddingSet;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

use crate::error::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` and
    /// `/embeddings` are appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Keys are never
    /// read from flags or files.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    pub max_in_flight: usize,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: 600.0,
            max_retries: 3,
            backoff_base_secs: 1.0,
            max_in_flight: 8,
            temperature: None,
            max_output_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) || self.backoff_base_secs < 0.0 {
            return Err(LlmError::Config("timeout must be > 0 and backoff >= 0".into()));
        }
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(LlmError::Config("base_url and model are required".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(retry as i32))
    }
}

/// Assistant text plus request bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// Anything that answers a (system, user) prompt pair: the HTTP client, or a
/// stub in tests.
pub trait ChatAgent: Sync {
    fn complete(
        &self,
        system: Option<&str>,
        user: &str,
    ) -> impl Future<Output = Result<Completion, LlmError>> + Send;

    fn model_name(&self) -> &str {
        "stub"
    }
}

impl<F> ChatAgent for F
where
    F: Fn(Option<&str>, &str) -> Result<String, LlmError> + Sync,
{
    fn complete(
        &self,
        system: Option<&str>,
        user: &str,
    ) -> impl Future<Output = Result<Completion, LlmError>> + Send {
        let start = Instant::now();
        let result = self(system, user).map(|text| Completion {
            text,
            attempts: 1,
            latency_ms: start.elapsed().as_millis() as u64,
        });
        std::future::ready(result)
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiClient {
    http: reqwest::Client,
    cfg: EndpointConfig,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl OpenAiClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                LlmError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { http, cfg, api_key })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    async fn post_once(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, LlmError> {
        let mut req = self.http.post(self.url(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(LlmError::Auth { status });
        }
        let text = resp.text().await.map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()))
    }

    /// POSTs with retries on transient failures. Returns the decoded body and
    /// the number of attempts made.
    async fn post(&self, path: &str, body: &serde_json::Value) -> Result<(serde_json::Value, u32), LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(path, body).await {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_transient() && attempt <= self.cfg.max_retries => {
                    let wait = self.cfg.backoff(attempt - 1);
                    warn!(attempt, error = %e, ?wait, "transient failure, retrying");
                    tokio::time::sleep(wait).await;
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::Exhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub async fn chat(&self, system: Option<&str>, user: &str) -> Result<Completion, LlmError> {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let mut body = json!({"model": self.cfg.model, "messages": messages});
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.cfg.max_output_tokens {
            body["max_tokens"] = json!(m);
        }
        let start = Instant::now();
        let (value, attempts) = self.post("chat/completions", &body).await?;
        let parsed: ChatResponse = serde_json::from_value(value).map_err(|e| LlmError::Decode(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Decode("no assistant message in response".into()))?;
        let latency_ms = start.elapsed().as_millis() as u64;
        debug!(attempts, latency_ms, "chat completion");
        Ok(Completion {
            text,
            attempts,
            latency_ms,
        })
    }

    /// One vector per text, in input order. When `normalize` is set, vectors
    /// are rescaled to unit length after retrieval.
    pub async fn embed(&self, texts: &[String], normalize: bool) -> Result<EmbeddingSet, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::Config("no texts to embed".into()));
        }
        let body = json!({"model": self.cfg.model, "input": texts});
        let (value, _) = self.post("embeddings", &body).await?;
        let parsed: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| LlmError::Decode(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(LlmError::Decode(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        let mut set = EmbeddingSet::new(data.into_iter().map(|d| d.embedding).collect())?;
        if normalize {
            set.normalize();
        }
        Ok(set)
    }
}

impl ChatAgent for OpenAiClient {
    fn complete(
        &self,
        system: Option<&str>,
        user: &str,
    ) -> impl Future<Output = Result<Completion, LlmError>> + Send {
        self.chat(system, user)
    }

    fn model_name(&self) -> &str {
        &self.cfg.model
    }
}
