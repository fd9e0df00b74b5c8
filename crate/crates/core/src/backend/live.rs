//! HTTP client for OpenAI-compatible chat and embedding endpoints.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use ureq::Agent;

use super::{Backend, ChatRequest};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "SUMMAFACT_API_KEY";

const BODY_EXCERPT_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    agent: Agent,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingList {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        LiveBackend { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if status >= 400 {
            return Err(Error::Backend {
                status,
                body: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        Ok(text)
    }
}

fn transport(e: ureq::Error) -> Error {
    Error::Transport {
        attempts: 1,
        message: e.to_string(),
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> String {
        format!(
            "live({} chat={} embed={})",
            self.config.base_url, self.config.chat_model, self.config.embedding_model
        )
    }

    fn chat(&self, req: &ChatRequest) -> Result<String> {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        let mut body = json!({
            "model": self.config.chat_model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let text = self.post("chat/completions", body)?;
        let parsed: ChatCompletion = serde_json::from_str(&text)?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({"model": self.config.embedding_model, "input": texts});
        let text = self.post("embeddings", body)?;
        let mut parsed: EmbeddingList = serde_json::from_str(&text)?;
        parsed.data.sort_by_key(|item| item.index);
        Ok(parsed.data.into_iter().map(|item| item.embedding).collect())
    }

    fn probe(&self) -> Result<()> {
        let mut req = self.agent.get(&self.url("models"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.call().map_err(transport)?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(Error::Backend {
                status,
                body: "model listing failed".into(),
            });
        }
        Ok(())
    }
}
