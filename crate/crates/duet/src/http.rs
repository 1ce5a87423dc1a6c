//! Blocking chat-completion client for OpenAI- and Gemini-shaped JSON
//! endpoints, with bounded retries.

use std::time::Duration;

use duet_core::{BackendError, ChatBackend, Message, RetryPolicy, Role};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Where and how to reach a hosted model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpChatSpec {
    pub endpoint: String,
    pub model: String,
    /// Dot path into the response JSON, numeric segments index arrays,
    /// e.g. `choices.0.message.content`.
    pub extraction_path: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Header carrying the raw key instead of `Authorization: Bearer`,
    /// e.g. `x-goog-api-key`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_header: Option<String>,
}

impl HttpChatSpec {
    pub fn validate(&self) -> Result<(), String> {
        let lower = self.endpoint.to_ascii_lowercase();
        if !(lower.starts_with("http://") || lower.starts_with("https://")) || self.endpoint.len() <= 8 {
            return Err(format!("endpoint `{}` is not an absolute http(s) URL", self.endpoint));
        }
        if self.extraction_path.is_empty() {
            return Err("extraction_path is empty".into());
        }
        if self.api_key_env.is_empty() {
            return Err("api_key_env is empty".into());
        }
        Ok(())
    }
}

/// Follows a dot/index path such as `candidates.0.content.parts.0.text`.
pub fn extract_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, segment| match v {
        Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(map) => map.get(segment),
        _ => None,
    })
}

fn wire_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::Assistant => "assistant",
        Role::User | Role::Tool => "user",
    }
}

pub fn request_body(model: &str, messages: &[Message]) -> Value {
    let messages: Vec<Value> =
        messages.iter().map(|m| json!({ "role": wire_role(m.role), "content": m.content })).collect();
    json!({ "model": model, "messages": messages })
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    match body.char_indices().nth(LIMIT) {
        Some((at, _)) => format!("{}…", &body[..at]),
        None => body.to_string(),
    }
}

pub struct HttpChatBackend {
    spec: HttpChatSpec,
    retry: RetryPolicy,
    agent: ureq::Agent,
    sleep: fn(Duration),
}

impl HttpChatBackend {
    pub fn new(spec: HttpChatSpec, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Self { spec, retry, agent, sleep: std::thread::sleep }
    }

    /// Replaces the backoff sleep, mostly so tests can skip waiting.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    fn api_key(&self) -> Result<String, BackendError> {
        std::env::var(&self.spec.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::MissingApiKey(self.spec.api_key_env.clone()))
    }

    fn send_once(&self, key: &str, body: &str) -> Result<String, BackendError> {
        let request = self.agent.post(&self.spec.endpoint).header("Content-Type", "application/json");
        let request = match self.spec.auth_header.as_deref() {
            Some(name) if !name.eq_ignore_ascii_case("authorization") => request.header(name, key),
            _ => request.header("Authorization", &format!("Bearer {key}")),
        };
        let mut response = request.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http { status, body: excerpt(&text) });
        }
        let json: Value = serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        let content = extract_path(&json, &self.spec.extraction_path)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::BadResponse(format!("no string at `{}`", self.spec.extraction_path)))?;
        if content.is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(content.to_string())
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyMessages);
        }
        let key = self.api_key()?;
        let body = request_body(&self.spec.model, messages).to_string();
        let mut attempt = 1;
        loop {
            (self.sleep)(self.retry.backoff_before(attempt));
            match self.send_once(&key, &body) {
                Ok(content) => return Ok(Message::assistant(content)),
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    log::warn!("{} attempt {attempt} failed: {e}", self.spec.endpoint);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_paths() {
        let openai = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(extract_path(&openai, "choices.0.message.content"), Some(&json!("hi")));
        let gemini = json!({"candidates": [{"content": {"parts": [{"text": "yo"}]}}]});
        assert_eq!(extract_path(&gemini, "candidates.0.content.parts.0.text"), Some(&json!("yo")));
        assert_eq!(extract_path(&openai, "choices.1.message"), None);
        assert_eq!(extract_path(&openai, "choices.x"), None);
    }

    #[test]
    fn body_shape() {
        let body = request_body("m", &[Message::system("s"), Message::user("u"), Message::assistant("a")]);
        assert_eq!(
            body,
            json!({"model": "m", "messages": [
                {"role": "system", "content": "s"},
                {"role": "user", "content": "u"},
                {"role": "assistant", "content": "a"}
            ]})
        );
    }

    #[test]
    fn spec_validation() {
        let spec = HttpChatSpec {
            endpoint: "https://api.example.com/v1/chat".into(),
            model: "m".into(),
            extraction_path: "choices.0.message.content".into(),
            api_key_env: "K".into(),
            auth_header: None,
        };
        assert!(spec.validate().is_ok());
        assert!(HttpChatSpec { endpoint: "/v1/chat".into(), ..spec.clone() }.validate().is_err());
        assert!(HttpChatSpec { api_key_env: String::new(), ..spec }.validate().is_err());
    }

    #[test]
    fn long_bodies_are_cut() {
        let body = "x".repeat(500);
        assert_eq!(excerpt(&body).chars().count(), 201);
        assert_eq!(excerpt("short"), "short");
    }
}
