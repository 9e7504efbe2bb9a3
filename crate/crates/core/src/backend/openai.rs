use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use reqwest::blocking::Client;
use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendConfig, BackendError, CompletionRequest, RetryPolicy};

/// Blocking client for OpenAI-compatible chat-completion servers
/// (hosted APIs, vLLM, llama.cpp, Ollama, ...).
pub struct OpenAiClient {
    http: Client,
    url: String,
    token: Option<String>,
    retry: RetryPolicy,
    attempts: AtomicU64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: Option<String>,
}

/// Resolves the chat-completions URL from a base endpoint.
pub(crate) fn chat_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

impl OpenAiClient {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let http = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(OpenAiClient {
            http,
            url: chat_url(&config.endpoint),
            token,
            retry: config.retry.clone(),
            attempts: AtomicU64::new(0),
        })
    }

    /// Total HTTP attempts made so far, including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.http.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("response has no message content".into()))
    }
}

impl Backend for OpenAiClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.retry.run(|attempt| {
            tracing::debug!(attempt, request_id = %request.request_id, url = %self.url, "chat completion");
            self.attempt(request)
        })
    }

    fn describe(&self) -> String {
        format!("openai-compatible({})", self.url)
    }
}
