//! Chat-completion client over HTTP.

use std::time::Duration;

use gazebot::inference::{ChatMessage, ClientKind, LlmClient, LlmError};
use serde::{Deserialize, Serialize};

pub const URL_VAR: &str = "GAZE_LLM_URL";
pub const KEY_VAR: &str = "GAZE_LLM_API_KEY";
pub const MODEL_VAR: &str = "GAZE_LLM_MODEL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

/// Posts `{"model", "messages"}` and reads `choices[0].message.content`.
pub struct HttpLlm {
    url: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpLlm {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(DEFAULT_TIMEOUT)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            api_key,
            model: model.into(),
            client,
        })
    }

    /// Endpoint from `GAZE_LLM_URL`, bearer token from `GAZE_LLM_API_KEY`,
    /// model name from `GAZE_LLM_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(URL_VAR).map_err(|_| LlmError::Config(format!("{URL_VAR} is not set")))?;
        let key = std::env::var(KEY_VAR).ok().filter(|k| !k.is_empty());
        let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".to_string());
        Self::new(url, key, model)
    }
}

impl LlmClient for HttpLlm {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.url).json(&ChatRequest {
            model: &self.model,
            messages,
        });
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = body.chars().take(200).collect();
            return Err(LlmError::Status(status.as_u16(), snippet));
        }
        let parsed: ChatResponse = serde_json::from_str(&body).map_err(|e| LlmError::Protocol(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Protocol("reply has no message content".into()))
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Http
    }
}
