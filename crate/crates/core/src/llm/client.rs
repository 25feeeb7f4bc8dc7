//! Chat-completion clients: an OpenAI-compatible HTTP client and scripted
//! mocks for offline runs.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{self, JsonEndpoint, RateLimiter, RetryPolicy};

use super::prompt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Transient failures retried before the final answer.
    pub retries: u32,
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<Completion>;
}

#[derive(Debug, Clone)]
pub struct LlmClientConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub min_request_interval: Duration,
}

impl LlmClientConfig {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
            min_request_interval: Duration::from_millis(100),
        }
    }

    /// Endpoint and key from `KGLAB_API_BASE` / `KGLAB_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let (base, key) = http::credentials_from_env()?;
        Ok(Self::new(base, key, model))
    }
}

/// `POST {base}/chat/completions` at temperature 0.
#[derive(Debug)]
pub struct HttpChatClient {
    endpoint: JsonEndpoint,
    model: String,
}

impl HttpChatClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self> {
        if cfg.api_key.trim().is_empty() {
            return Err(Error::Config("chat client needs an API key".into()));
        }
        if cfg.base_url.trim().is_empty() {
            return Err(Error::Config("chat client needs an endpoint".into()));
        }
        let endpoint = JsonEndpoint::new(
            http::join_url(&cfg.base_url, "chat/completions"),
            cfg.api_key,
            cfg.timeout,
            cfg.retry,
            RateLimiter::new(cfg.min_request_interval),
        )?;
        Ok(Self {
            endpoint,
            model: cfg.model,
        })
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        chat_request(&self.model, prompt)
    }
}

pub fn chat_request(model: &str, prompt: &str) -> Value {
    json!({
        "model": model,
        "temperature": 0,
        "messages": [{ "role": "user", "content": prompt }],
    })
}

/// `choices[0].message.content`
pub fn parse_chat_response(resp: &Value) -> Result<String> {
    resp.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            Error::Transport(format!(
                "response has no choices[0].message.content: {resp}"
            ))
        })
}

impl ChatModel for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<Completion> {
        let (resp, retries) = self.endpoint.post(&self.request_body(prompt))?;
        Ok(Completion {
            text: parse_chat_response(&resp)?,
            retries,
        })
    }
}

/// Offline stand-in. Scripted mocks look up the prompt's final `Q:` line.
pub struct MockChat {
    respond: Box<dyn Fn(&str) -> Result<String> + Send + Sync>,
}

impl MockChat {
    pub fn new(respond: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(respond),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Answers each test query with the next scripted reply for it. The
    /// queue is consumed in order, so repeated queries get successive
    /// replies; an unknown or exhausted query is an error.
    pub fn scripted(replies: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for (q, a) in replies {
            queues.entry(q).or_default().push_back(a);
        }
        let queues = Mutex::new(queues);
        Self::new(move |p| {
            let q = prompt::parse_test_query(p)
                .ok_or_else(|| Error::InvalidArgument("prompt has no test query".into()))?;
            let mut queues = queues.lock().unwrap_or_else(|e| e.into_inner());
            queues
                .get_mut(&q)
                .and_then(VecDeque::pop_front)
                .ok_or_else(|| Error::InvalidArgument(format!("no scripted reply left for {q}")))
        })
    }
}

impl ChatModel for MockChat {
    fn complete(&self, prompt: &str) -> Result<Completion> {
        Ok(Completion {
            text: (self.respond)(prompt)?,
            retries: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let body = chat_request("m", "hi");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
        let resp = json!({"choices": [{"message": {"content": "red"}}]});
        assert_eq!(parse_chat_response(&resp).unwrap(), "red");
        assert!(parse_chat_response(&json!({})).is_err());
    }

    #[test]
    fn missing_key_is_config_error() {
        let err =
            HttpChatClient::new(LlmClientConfig::new("http://127.0.0.1:9", "", "m")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mocks() {
        assert_eq!(MockChat::constant("red").complete("x").unwrap().text, "red");
        let m = MockChat::scripted([
            ("(a, r, ?)".to_string(), "b".to_string()),
            ("(a, r, ?)".to_string(), "c".to_string()),
        ]);
        let p = "task\n\nQ: (a, r, ?)\nA: ";
        assert_eq!(m.complete(p).unwrap().text, "b");
        assert_eq!(m.complete(p).unwrap().text, "c");
        assert!(m.complete(p).is_err());
    }
}
