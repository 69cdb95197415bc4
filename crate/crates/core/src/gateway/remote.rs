//! Remote backend speaking the OpenAI-compatible chat-completion wire
//! format. The API key comes from an environment variable named in the
//! config; the base URL comes from the config.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendReply, CompletionRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_api_key_env() -> String {
    "LCBOOST_API_KEY".to_string()
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            api_key_env: default_api_key_env(),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    name: String,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: Option<usize>,
    #[serde(default)]
    completion_tokens: Option<usize>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok();
        let name = format!("remote:{}", config.model);
        Self {
            config,
            api_key,
            client: reqwest::blocking::Client::new(),
            name,
        }
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }

        let mut http = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Transport(format!("{status}: {text}")));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("bad response body: {e}")))?;
        let content = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| GatewayError::Transport("response has no choices".to_string()))?;
        let usage = parsed.usage.unwrap_or(ChatUsage {
            prompt_tokens: None,
            completion_tokens: None,
        });
        Ok(BackendReply {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            response_tokens: usage.completion_tokens,
            cache_hit: false,
        })
    }
}
