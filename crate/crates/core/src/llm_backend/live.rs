use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::types::{
    BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, MessageRole, Reply,
    ToolCall, Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub retry_backoff_ms: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            max_in_flight: 4,
            retry_backoff_ms: 500,
        }
    }
}

/// HTTP client for `POST {base_url}/chat/completions`.
pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    http: reqwest::Client,
    permits: Semaphore,
}

impl LiveBackend {
    /// Reads the credential from the configured environment variable.
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::MissingCredential(config.api_key_env.clone()))?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        Ok(Self {
            permits: Semaphore::new(config.max_in_flight.max(1)),
            config,
            api_key,
            http,
        })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    async fn send_once(&self, body: &Value) -> Result<ChatResponse, Attempt> {
        let response = self
            .http
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| Attempt::Transient(BackendError::Network(e.to_string())))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .await
            .map_err(|e| Attempt::Transient(BackendError::Network(e.to_string())))?;
        match status {
            200..=299 => decode_response(&text).map_err(Attempt::Fatal),
            401 | 403 => Err(Attempt::Fatal(BackendError::Auth(text))),
            429 => Err(Attempt::RateLimited),
            500..=599 => Err(Attempt::Transient(BackendError::Status { status, body: text })),
            _ => Err(Attempt::Fatal(BackendError::Status { status, body: text })),
        }
    }
}

enum Attempt {
    RateLimited,
    Transient(BackendError),
    Fatal(BackendError),
}

#[async_trait]
impl ChatBackend for LiveBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let body = encode_request(request, &self.config.model);
        let attempts = self.config.max_retries + 1;
        let mut last = BackendError::RateLimited { attempts };
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            match self.send_once(&body).await {
                Ok(response) => return Ok(response),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::RateLimited) => last = BackendError::RateLimited { attempts },
                Err(Attempt::Transient(e)) => {
                    tracing::debug!(attempt, error = %e, "transient backend failure");
                    last = e;
                }
            }
        }
        Err(last)
    }
}

fn encode_message(message: &ChatMessage) -> Value {
    let role = match message.role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
        MessageRole::Tool => "tool",
    };
    let mut out = json!({ "role": role, "content": message.content });
    if !message.tool_calls.is_empty() {
        out["content"] = Value::Null;
        out["tool_calls"] = message
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.args.to_string() },
                })
            })
            .collect();
    }
    if let Some(id) = &message.tool_call_id {
        out["tool_call_id"] = json!(id);
    }
    out
}

/// Builds the OpenAI-compatible request body.
pub fn encode_request(request: &ChatRequest, default_model: &str) -> Value {
    let model = if request.model.is_empty() {
        default_model
    } else {
        &request.model
    };
    let mut body = json!({
        "model": model,
        "messages": request.messages.iter().map(encode_message).collect::<Vec<_>>(),
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if !request.tool_schemas.is_empty() {
        body["tools"] = request
            .tool_schemas
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    },
                })
            })
            .collect();
    }
    body
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Deserialize)]
struct WireToolCall {
    #[serde(default)]
    id: String,
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

/// Parses a chat/completions response body. Unparseable tool arguments are
/// kept as a JSON string so the policy check can reject them.
pub fn decode_response(text: &str) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|e| BackendError::Decode(e.to_string()))?;
    let message = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Decode("response has no choices".into()))?
        .message;
    let usage = wire
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    let reply = if message.tool_calls.is_empty() {
        Reply::Text(message.content.unwrap_or_default())
    } else {
        Reply::ToolCalls(
            message
                .tool_calls
                .into_iter()
                .map(|c| ToolCall {
                    args: if c.function.arguments.trim().is_empty() {
                        json!({})
                    } else {
                        serde_json::from_str(&c.function.arguments)
                            .unwrap_or(Value::String(c.function.arguments))
                    },
                    id: c.id,
                    name: c.function.name,
                })
                .collect(),
        )
    };
    Ok(ChatResponse { reply, usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_text_and_tool_calls() {
        let text = r#"{"choices":[{"message":{"content":"hi [Inquiry]"}}],"usage":{"prompt_tokens":3,"completion_tokens":2}}"#;
        let r = decode_response(text).unwrap();
        assert_eq!(r.reply, Reply::Text("hi [Inquiry]".into()));
        assert_eq!(r.usage.prompt_tokens, 3);

        let text = r#"{"choices":[{"message":{"content":null,"tool_calls":[{"id":"c1","type":"function","function":{"name":"get_all_needs","arguments":"{}"}},{"id":"c2","type":"function","function":{"name":"x","arguments":"not json"}}]}}]}"#;
        let r = decode_response(text).unwrap();
        let Reply::ToolCalls(calls) = r.reply else {
            panic!("expected tool calls")
        };
        assert_eq!(calls[0].name, "get_all_needs");
        assert_eq!(calls[0].args, json!({}));
        assert_eq!(calls[1].args, json!("not json"));
    }

    #[test]
    fn encodes_tool_round_trip_messages() {
        let call = ToolCall {
            id: "c1".into(),
            name: "get_all_needs".into(),
            args: json!({}),
        };
        let req = ChatRequest {
            key: crate::llm_backend::CallKey::new("s", "milestone", 0),
            model: String::new(),
            messages: vec![
                ChatMessage::system("sys"),
                ChatMessage::assistant_tool_calls(vec![call.clone()]),
                ChatMessage::tool_result(&call, "{}"),
            ],
            tool_schemas: Vec::new(),
            temperature: 0.0,
            max_tokens: 10,
        };
        let body = encode_request(&req, "gpt-4o");
        assert_eq!(body["model"], "gpt-4o");
        assert!(body.get("tools").is_none());
        assert_eq!(body["messages"][1]["tool_calls"][0]["function"]["arguments"], "{}");
        assert_eq!(body["messages"][2]["tool_call_id"], "c1");
    }

    #[test]
    fn missing_credential_is_reported() {
        let config = LiveConfig {
            api_key_env: "NEEDCRAFT_TEST_UNSET_KEY_VAR".into(),
            ..LiveConfig::default()
        };
        assert!(matches!(
            LiveBackend::new(config),
            Err(BackendError::MissingCredential(_))
        ));
    }
}
