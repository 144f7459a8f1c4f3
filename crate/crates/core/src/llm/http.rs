use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use super::{ChatRequest, ChatResponse, LlmBackend, LlmError};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt` (1-based).
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self.base_delay.as_secs_f64() * 2f64.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(rand::rng().random_range(0.0..=cap))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        let mut base = base_url.trim_end_matches('/').to_string();
        if let Some(stripped) = base.strip_suffix("/v1") {
            base = stripped.to_string();
        }
        Self {
            base_url: base,
            api_key: None,
            model: model.to_string(),
            timeout: Duration::from_secs(300),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `OPENAI_BASE_URL`, `OPENAI_API_KEY` and `OPENAI_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "https://api.openai.com".into());
        let model = std::env::var("OPENAI_MODEL")
            .map_err(|_| LlmError::InvalidRequest("OPENAI_MODEL is not set".into()))?;
        let mut cfg = Self::new(&base, &model);
        cfg.api_key = std::env::var("OPENAI_API_KEY").ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum AttemptError {
    Retryable(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(s) = &request.system_text {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(m) = request.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        let url = format!("{}/v1/chat/completions", self.config.base_url);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send(serde_json::to_vec(body).expect("body serializes").as_slice())
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(AttemptError::Retryable(format!("status {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(LlmError::BackendRefused { status, body: text }));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(LlmError::MalformedOutput(format!("response body: {e}"))))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                AttemptError::Fatal(LlmError::MalformedOutput(
                    "response lacks choices[0].message.content".into(),
                ))
            })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = self.body(request);
        let start = Instant::now();
        let mut last = String::new();
        let max = self.config.retry.max_attempts.max(1);
        for attempt in 1..=max {
            match self.attempt(&body) {
                Ok(text) => {
                    return Ok(ChatResponse {
                        text,
                        backend_id: self.backend_id(),
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempts: attempt,
                    })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => {
                    log::warn!("chat completion attempt {attempt}/{max} failed: {msg}");
                    last = msg;
                    if attempt < max {
                        std::thread::sleep(self.config.retry.delay(attempt));
                    }
                }
            }
        }
        Err(LlmError::Transport {
            attempts: max,
            message: last,
        })
    }

    fn backend_id(&self) -> String {
        format!("http:{}", self.config.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned `(status, body)` per connection, in order.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    fn backend(addr: &str) -> HttpBackend {
        let mut cfg = HttpConfig::new(addr, "test-model");
        cfg.retry.base_delay = Duration::from_millis(1);
        cfg.api_key = Some("k".into());
        HttpBackend::new(cfg)
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn retries_through_rate_limits() {
        let (addr, h) = serve(vec![
            (429, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("hello")),
        ]);
        let req = ChatRequest::new("t", 0, "hi").unwrap().with_max_tokens(Some(16));
        let resp = backend(&addr).complete(&req).unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(resp.attempts, 3);
        let bodies = h.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[2]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][0]["content"], "hi");
        assert_eq!(sent["max_tokens"], 16);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (addr, h) = serve(vec![(400, "{\"error\": \"bad\"}".into())]);
        let req = ChatRequest::new("t", 0, "hi").unwrap();
        let err = backend(&addr).complete(&req).unwrap_err();
        assert!(matches!(err, LlmError::BackendRefused { status: 400, .. }));
        h.join().unwrap();
    }

    #[test]
    fn exhausted_retries_are_transport_errors() {
        let (addr, h) = serve((0..5).map(|_| (503, "{}".to_string())).collect());
        let req = ChatRequest::new("t", 0, "hi").unwrap();
        let err = backend(&addr).complete(&req).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 5, .. }));
        h.join().unwrap();
    }

    #[test]
    fn base_url_normalized() {
        assert_eq!(HttpConfig::new("http://h:1/v1/", "m").base_url, "http://h:1");
    }
}
