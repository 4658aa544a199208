//! Generic JSON chat-completions adapter (`POST {base_url}/chat/completions`).
//!
//! Provider-specific safety signalling is folded into [`FinishReason`]:
//! `content_filter`/`safety` become `Blocked`, `recitation` becomes
//! `Recitation`, and an empty `choices` list with `prompt_feedback` is a block.

use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};

use super::{BackendError, ChatRequest, ChatResponse, FinishReason, Provider};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env_var: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            auth_env_var: None,
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// Reads the API key from the configured environment variable; a missing
    /// variable is a configuration error rather than an unauthenticated call.
    pub fn new(config: &HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &config.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        Self::build(config, api_key)
    }

    /// Same endpoint identity without reading a key; for offline runs that
    /// are answered from the cache.
    pub fn without_key(config: &HttpConfig) -> Result<Self, BackendError> {
        Self::build(config, None)
    }

    fn build(config: &HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// Builds the wire body. Extras whose key starts with `x-` are local
/// annotations and stay off the wire; values that parse as JSON are sent as
/// JSON, anything else as a string.
pub(crate) fn wire_body(req: &ChatRequest) -> Value {
    let mut body = Map::new();
    body.insert("model".into(), json!(req.model_id));
    body.insert(
        "messages".into(),
        serde_json::to_value(&req.messages).expect("serializable"),
    );
    body.insert("temperature".into(), json!(req.temperature));
    body.insert("max_tokens".into(), json!(req.max_tokens));
    for (k, v) in &req.extra {
        if k.starts_with("x-") {
            continue;
        }
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
        body.insert(k.clone(), value);
    }
    Value::Object(body)
}

fn map_finish_reason(reason: Option<&str>) -> FinishReason {
    match reason.map(str::to_ascii_lowercase).as_deref() {
        Some("stop") | Some("end_turn") | None => FinishReason::Stop,
        Some("length") | Some("max_tokens") => FinishReason::Length,
        Some("content_filter") | Some("safety") | Some("blocked") | Some("prohibited_content") => {
            FinishReason::Blocked
        }
        Some("recitation") => FinishReason::Recitation,
        Some(_) => FinishReason::Other,
    }
}

pub(crate) fn parse_reply(raw: Value, latency: Duration) -> Result<ChatResponse, BackendError> {
    let malformed = |why: &str| BackendError::MalformedProviderReply(why.to_string());
    let choices = raw
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing `choices` array"))?;
    let Some(first) = choices.first() else {
        if raw.get("prompt_feedback").is_some() || raw.get("promptFeedback").is_some() {
            return Ok(ChatResponse {
                content: String::new(),
                finish_reason: FinishReason::Blocked,
                latency,
                raw,
            });
        }
        return Err(malformed("empty `choices` array"));
    };
    let finish_reason = map_finish_reason(first.get("finish_reason").and_then(Value::as_str));
    let content = match first.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None if finish_reason != FinishReason::Stop => String::new(),
        _ => return Err(malformed("missing `message.content`")),
    };
    Ok(ChatResponse {
        content,
        finish_reason,
        latency,
        raw,
    })
}

impl Provider for HttpProvider {
    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut builder = self.client.post(&self.endpoint).json(&wire_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited { attempts: 1 });
        }
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                message: text.chars().take(500).collect(),
            });
        }
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedProviderReply(format!("invalid JSON: {e}")))?;
        parse_reply(raw, started.elapsed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatMessage;

    #[test]
    fn body_forwards_extras() {
        let mut req = ChatRequest::new("llama3-70b", vec![ChatMessage::user("hi")]);
        req.extra.insert(
            "safety_settings".into(),
            r#"[{"threshold":"BLOCK_NONE"}]"#.into(),
        );
        req.extra.insert("user".into(), "harness".into());
        req.extra.insert("x-note".into(), "local".into());
        let body = wire_body(&req);
        assert_eq!(body["model"], "llama3-70b");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["safety_settings"][0]["threshold"], "BLOCK_NONE");
        assert_eq!(body["user"], "harness");
        assert!(body.get("x-note").is_none());
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn reply_parsing() {
        let ok = json!({"choices":[{"message":{"role":"assistant","content":"1\nArticle 3"},"finish_reason":"stop"}]});
        let r = parse_reply(ok, Duration::ZERO).unwrap();
        assert_eq!(r.content, "1\nArticle 3");
        assert_eq!(r.finish_reason, FinishReason::Stop);

        let filtered =
            json!({"choices":[{"message":{"content":null},"finish_reason":"content_filter"}]});
        assert_eq!(
            parse_reply(filtered, Duration::ZERO).unwrap().finish_reason,
            FinishReason::Blocked
        );

        let recited = json!({"choices":[{"message":{"content":""},"finish_reason":"RECITATION"}]});
        assert_eq!(
            parse_reply(recited, Duration::ZERO).unwrap().finish_reason,
            FinishReason::Recitation
        );

        let feedback = json!({"choices":[], "prompt_feedback":{"block_reason":"SAFETY"}});
        assert_eq!(
            parse_reply(feedback, Duration::ZERO).unwrap().finish_reason,
            FinishReason::Blocked
        );

        assert!(parse_reply(json!({"choices":[]}), Duration::ZERO).is_err());
        assert!(parse_reply(json!({"error":"x"}), Duration::ZERO).is_err());
        assert!(parse_reply(
            json!({"choices":[{"finish_reason":"stop"}]}),
            Duration::ZERO
        )
        .is_err());
    }

    #[test]
    fn missing_key_variable_is_config_error() {
        let mut cfg = HttpConfig::new("http://localhost:1");
        cfg.auth_env_var = Some("REQUEST_HARNESS_TEST_UNSET_KEY".into());
        assert!(matches!(
            HttpProvider::new(&cfg),
            Err(BackendError::Config(_))
        ));
    }
}
