//! Chat-completion client with bounded parallelism and retries, plus an
//! offline scripted backend for deterministic runs.

use std::cell::RefCell;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use factcheck_core::Completer;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::BackendConfig;

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Protocol(String),
    #[error("no mock entry matches prompt starting with {prompt_prefix:?}")]
    Mock { prompt_prefix: String },
}

/// Audit record of one completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionExchange {
    pub backend: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempt_count: u32,
    pub latency_ms: u64,
    pub timestamp: String,
}

/// Counting gate: at most `max` holders at once.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), state: Mutex::new((0, 0)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().unwrap();
        while s.0 >= self.max {
            s = self.freed.wait(s).unwrap();
        }
        s.0 += 1;
        s.1 = s.1.max(s.0);
        Permit(self)
    }

    /// Highest number of simultaneous holders seen so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap();
        s.0 -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Prefix(String),
    Contains(String),
    AllOf(Vec<Matcher>),
    Any,
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Exact(s) => prompt == s,
            Matcher::Prefix(s) => prompt.starts_with(s.as_str()),
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::AllOf(all) => all.iter().all(|m| m.matches(prompt)),
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    /// Simulated transport failure.
    Error { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    /// Returned in order on successive matches; the last one repeats.
    pub replies: Vec<MockReply>,
}

impl MockEntry {
    pub fn new(matcher: Matcher, reply: impl Into<String>) -> Self {
        Self { matcher, replies: vec![MockReply::Text(reply.into())] }
    }

    pub fn sequence(matcher: Matcher, replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { matcher, replies: replies.into_iter().map(|r| MockReply::Text(r.into())).collect() }
    }

    pub fn failing(matcher: Matcher, error: impl Into<String>) -> Self {
        Self { matcher, replies: vec![MockReply::Error { error: error.into() }] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
    /// Simulated latency per call.
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockScript {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::parse(path, e.line(), e.to_string()))
    }
}

/// Offline backend: first matching entry wins, in declared order.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    cursors: Vec<AtomicUsize>,
}

/// Build a deterministic offline backend from a script.
pub fn register_mock(script: MockScript) -> MockBackend {
    let cursors = script.entries.iter().map(|_| AtomicUsize::new(0)).collect();
    MockBackend { script, cursors }
}

impl MockBackend {
    fn reply(&self, prompt: &str) -> Result<String, LmError> {
        if self.script.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        let (i, entry) = self
            .script
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.matcher.matches(prompt))
            .ok_or_else(|| LmError::Mock { prompt_prefix: prompt.chars().take(60).collect() })?;
        let n = self.cursors[i].fetch_add(1, Ordering::SeqCst);
        match entry.replies.get(n).or(entry.replies.last()) {
            Some(MockReply::Text(t)) => Ok(t.clone()),
            Some(MockReply::Error { error }) => Err(LmError::Transport { attempts: 1, message: error.clone() }),
            None => Err(LmError::Mock { prompt_prefix: prompt.chars().take(60).collect() }),
        }
    }
}

enum Attempt {
    Done(String),
    Retry(LmError),
    Fatal(LmError),
}

struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpTransport {
    fn new(config: &BackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self { agent, endpoint: config.endpoint(), token }
    }

    fn attempt(&self, config: &BackendConfig, prompt: &str, attempt: u32) -> Attempt {
        let body = json!({
            "model": config.model_name,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        });
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(LmError::Transport { attempts: attempt, message: e.to_string() }),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(LmError::Transport { attempts: attempt, message: e.to_string() }),
        };
        if !(200..300).contains(&status) {
            let err = LmError::Backend { status, body: text.chars().take(EXCERPT_LEN).collect() };
            return if status == 429 || status >= 500 { Attempt::Retry(err) } else { Attempt::Fatal(err) };
        }
        match extract_content(&text) {
            Ok(c) => Attempt::Done(c),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

/// Content of the first choice's message.
pub fn extract_content(body: &str) -> Result<String, LmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LmError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LmError::Protocol(format!("no choices[0].message.content in {}", excerpt(body))))
}

fn excerpt(s: &str) -> String {
    s.chars().take(EXCERPT_LEN).collect()
}

enum Transport {
    Http(HttpTransport),
    Mock(MockBackend),
}

/// A configured backend, shareable across threads.
pub struct LmClient {
    config: BackendConfig,
    transport: Transport,
    limiter: Limiter,
}

impl LmClient {
    pub fn http(config: BackendConfig) -> Self {
        let limiter = Limiter::new(config.max_parallel);
        Self { transport: Transport::Http(HttpTransport::new(&config)), config, limiter }
    }

    pub fn mock(config: BackendConfig, backend: MockBackend) -> Self {
        let limiter = Limiter::new(config.max_parallel);
        Self { transport: Transport::Mock(backend), config, limiter }
    }

    /// HTTP unless the config names a mock script.
    pub fn from_config(config: &BackendConfig) -> crate::Result<Self> {
        Ok(match &config.mock {
            Some(path) => Self::mock(config.clone(), register_mock(MockScript::load(path)?)),
            None => Self::http(config.clone()),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.model_name
    }

    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    /// One completion with retries; always yields an audit record.
    pub fn complete_exchange(&self, prompt: &str) -> (Result<String, LmError>, CompletionExchange) {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let timestamp = chrono::Utc::now().to_rfc3339();
        let (result, attempts) = match &self.transport {
            Transport::Mock(m) => (m.reply(prompt), 1),
            Transport::Http(h) => self.with_retries(h, prompt),
        };
        let exchange = CompletionExchange {
            backend: self.config.model_name.clone(),
            prompt: prompt.to_string(),
            completion: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
            attempt_count: attempts,
            latency_ms: started.elapsed().as_millis() as u64,
            timestamp,
        };
        (result, exchange)
    }

    fn with_retries(&self, http: &HttpTransport, prompt: &str) -> (Result<String, LmError>, u32) {
        let max_attempts = self.config.retry_limit + 1;
        let mut attempt = 1;
        loop {
            match http.attempt(&self.config, prompt, attempt) {
                Attempt::Done(text) => return (Ok(text), attempt),
                Attempt::Fatal(e) => return (Err(e), attempt),
                Attempt::Retry(e) if attempt >= max_attempts => return (Err(e), attempt),
                Attempt::Retry(e) => {
                    log::warn!("{}: attempt {attempt} failed: {e}", self.config.model_name);
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String, LmError> {
        self.complete_exchange(prompt).0
    }
}

impl Completer for LmClient {
    type Error = LmError;

    fn complete(&self, prompt: &str) -> Result<String, LmError> {
        LmClient::complete(self, prompt)
    }
}

/// Exchanges of one case, in call order, possibly across several clients.
#[derive(Debug, Default)]
pub struct ExchangeLog(RefCell<Vec<CompletionExchange>>);

impl ExchangeLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<CompletionExchange> {
        self.0.into_inner()
    }
}

/// A client that appends every exchange it makes to a log.
pub struct Recording<'a> {
    client: &'a LmClient,
    log: &'a ExchangeLog,
}

impl<'a> Recording<'a> {
    pub fn new(client: &'a LmClient, log: &'a ExchangeLog) -> Self {
        Self { client, log }
    }
}

impl Completer for Recording<'_> {
    type Error = LmError;

    fn complete(&self, prompt: &str) -> Result<String, LmError> {
        let (result, exchange) = self.client.complete_exchange(prompt);
        self.log.0.borrow_mut().push(exchange);
        result
    }
}
