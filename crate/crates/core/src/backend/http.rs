//! Client for chat-completions style inference servers.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, BackendError, Completion, LanguageModel, Prompt, SamplingParams};

pub const API_KEY_ENV: &str = "FORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_concurrency: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".to_string(),
            model: "default".to_string(),
            max_retries: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            timeout_secs: 120,
            max_concurrency: 8,
        }
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    top_p: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default, Clone, Copy)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    id: String,
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    /// Build a client; the bearer token is read from `FORGE_API_KEY` when set.
    pub fn new(config: HttpConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("http:{}", config.model),
            gate: Gate::new(config.max_concurrency),
            config,
            api_key,
            agent,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    /// Delay before retry number `attempt` (1-based): exponential with up to
    /// 100% additive jitter, capped.
    pub fn backoff(&self, attempt: u32, jitter: f64) -> Duration {
        let base = self
            .config
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(20));
        let ms = (base as f64 * (1.0 + jitter.clamp(0.0, 1.0))) as u64;
        Duration::from_millis(ms.min(self.config.max_backoff_ms))
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, Attempt> {
        let _permit = self.gate.acquire();
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("status {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Rejected {
                status,
                body: text,
            }));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::Malformed(e.to_string())))
    }

    /// One request with retries. Returns the response and the attempt count.
    fn request(&self, body: &ChatRequest<'_>) -> Result<(ChatResponse, u32), BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(body) {
                Ok(r) => return Ok((r, attempts)),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    log::warn!("{}: attempt {attempts} failed: {message}", self.id);
                    std::thread::sleep(self.backoff(attempts, rand::random::<f64>()));
                }
            }
        }
    }
}

/// Split `total` across samples proportionally to `weights`, remainder to the
/// last sample, so the parts always sum to `total`.
fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: u64 = weights.iter().sum();
    let mut parts: Vec<u64> = if sum == 0 {
        let each = total / weights.len() as u64;
        vec![each; weights.len()]
    } else {
        weights
            .iter()
            .map(|w| ((total as u128 * *w as u128) / sum as u128) as u64)
            .collect()
    };
    let assigned: u64 = parts.iter().sum();
    *parts.last_mut().unwrap() += total - assigned;
    parts
}

impl LanguageModel for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, BackendError> {
        params.validate()?;
        let mut out: Vec<Completion> = Vec::with_capacity(params.n as usize);
        let mut round = 0u64;
        while out.len() < params.n as usize {
            let remaining = params.n - out.len() as u32;
            let body = ChatRequest {
                model: &self.config.model,
                messages: vec![Message {
                    role: "user",
                    content: &prompt.rendered_text,
                }],
                temperature: params.temperature,
                top_p: params.top_p,
                n: remaining,
                max_tokens: params.max_tokens,
                seed: params.seed.map(|s| s.wrapping_add(round)),
            };
            let (resp, _attempts) = self.request(&body)?;
            if resp.choices.is_empty() {
                return Err(BackendError::Malformed("response has no choices".into()));
            }
            let usage = resp.usage.unwrap_or_default();
            let texts: Vec<String> = resp
                .choices
                .into_iter()
                .take(remaining as usize)
                .map(|c| c.message.content.unwrap_or_default())
                .collect();
            let weights: Vec<u64> = texts.iter().map(|t| whitespace_tokens(t)).collect();
            let completion_parts = apportion(usage.completion_tokens, &weights);
            for (i, (text, completion_tokens)) in
                texts.into_iter().zip(completion_parts).enumerate()
            {
                // The prompt is processed once per request.
                let prompt_tokens = if i == 0 { usage.prompt_tokens } else { 0 };
                let index = out.len() as u32;
                out.push(Completion::new(
                    text,
                    prompt_tokens,
                    completion_tokens,
                    &self.id,
                    index,
                ));
            }
            round += 1;
        }
        Ok(out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "base_url": self.config.base_url,
            "model": self.config.model,
            "max_retries": self.config.max_retries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TemplateSet;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    struct Captured {
        requests: Vec<(String, serde_json::Value)>,
    }

    /// Serve the scripted (status, body) pairs one connection each.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Captured>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let captured = Arc::new(Mutex::new(Captured { requests: vec![] }));
        let sink = captured.clone();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
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
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let json = serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null);
                sink.lock().unwrap().requests.push((head, json));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), captured)
    }

    fn ok_body(texts: &[&str], prompt: u64, completion: u64) -> String {
        serde_json::json!({
            "choices": texts.iter().map(|t| serde_json::json!({"message": {"role": "assistant", "content": t}})).collect::<Vec<_>>(),
            "usage": {"prompt_tokens": prompt, "completion_tokens": completion},
        })
        .to_string()
    }

    fn backend(url: String, retries: u32) -> HttpBackend {
        HttpBackend::with_api_key(
            HttpConfig {
                base_url: url,
                model: "m".into(),
                max_retries: retries,
                initial_backoff_ms: 1,
                max_backoff_ms: 5,
                timeout_secs: 5,
                max_concurrency: 2,
            },
            Some("secret".into()),
        )
    }

    #[test]
    fn request_shape_and_usage() {
        let (url, cap) = serve(vec![(200, ok_body(&["a b", "c d e f"], 12, 6))]);
        let b = backend(url, 2);
        let p = TemplateSet::biography().write("X").unwrap();
        let out = b
            .generate(&p, &SamplingParams::default().with_n(2).with_seed(3))
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].text, "a b");
        assert_eq!(out[1].sample_index, 1);
        assert_eq!(out.iter().map(|c| c.completion_tokens).sum::<u64>(), 6);
        assert_eq!(out.iter().map(|c| c.prompt_tokens).sum::<u64>(), 12);

        let cap = cap.lock().unwrap();
        let (head, json) = &cap.requests[0];
        assert!(head.starts_with("POST /v1/chat/completions"));
        assert!(head
            .to_ascii_lowercase()
            .contains("authorization: bearer secret"));
        assert_eq!(json["model"], "m");
        assert_eq!(json["n"], 2);
        assert_eq!(json["seed"], 3);
        assert_eq!(json["top_p"], 0.9);
        assert_eq!(json["max_tokens"], 512);
        assert_eq!(json["messages"][0]["role"], "user");
        assert_eq!(
            json["messages"][0]["content"],
            "Write a biography of X of up to 4 sentences."
        );
    }

    #[test]
    fn retries_on_429_and_5xx() {
        let (url, cap) = serve(vec![
            (429, "slow down".into()),
            (503, "busy".into()),
            (200, ok_body(&["fine"], 3, 1)),
        ]);
        let b = backend(url, 3);
        let p = TemplateSet::biography().write("X").unwrap();
        let out = b.generate(&p, &SamplingParams::default()).unwrap();
        assert_eq!(out[0].text, "fine");
        assert_eq!(cap.lock().unwrap().requests.len(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (url, cap) = serve(vec![
            (500, "x".into()),
            (500, "x".into()),
            (500, "x".into()),
        ]);
        let b = backend(url, 2);
        let p = TemplateSet::biography().write("X").unwrap();
        match b.generate(&p, &SamplingParams::default()) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(cap.lock().unwrap().requests.len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, cap) = serve(vec![(400, "bad".into())]);
        let b = backend(url, 3);
        let p = TemplateSet::biography().write("X").unwrap();
        assert!(matches!(
            b.generate(&p, &SamplingParams::default()),
            Err(BackendError::Rejected { status: 400, .. })
        ));
        assert_eq!(cap.lock().unwrap().requests.len(), 1);
    }

    #[test]
    fn tops_up_when_server_ignores_n() {
        let (url, cap) = serve(vec![
            (200, ok_body(&["one"], 5, 1)),
            (200, ok_body(&["two"], 5, 1)),
        ]);
        let b = backend(url, 0);
        let p = TemplateSet::biography().write("X").unwrap();
        let out = b
            .generate(&p, &SamplingParams::default().with_n(2))
            .unwrap();
        assert_eq!(
            out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
            ["one", "two"]
        );
        assert_eq!(cap.lock().unwrap().requests[1].1["n"], 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let b = HttpBackend::with_api_key(HttpConfig::default(), None);
        assert_eq!(b.backoff(1, 0.0), Duration::from_millis(500));
        assert_eq!(b.backoff(3, 0.0), Duration::from_millis(2000));
        assert_eq!(b.backoff(2, 0.5), Duration::from_millis(1500));
        assert_eq!(b.backoff(30, 1.0), Duration::from_millis(30_000));
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[1, 1]), vec![5, 5]);
        assert_eq!(apportion(7, &[0, 0, 0]), vec![2, 2, 3]);
        assert_eq!(apportion(6, &[2, 4]).iter().sum::<u64>(), 6);
    }
}
