//! Chat-completion backends: an HTTP client for OpenAI-compatible endpoints
//! and a scripted backend that replays canned responses.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{StageConfig, StageKind};
use crate::util::{JsonlLog, Semaphore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("response truncated (finish_reason={finish_reason})")]
    Truncated { finish_reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Errors that describe the backend rather than one response; the
    /// pipeline shuts down cleanly on these instead of burning trials.
    pub fn is_outage(&self) -> bool {
        matches!(self, LlmError::BackendUnavailable { .. } | LlmError::Rejected { .. } | LlmError::InvalidRequest(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_completion_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_effort: Option<String>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        let invalid = |m: &str| Err(LlmError::InvalidRequest(m.to_string()));
        if self.model.is_empty() {
            return invalid("model is empty");
        }
        match self.messages.last() {
            None => return invalid("messages is empty"),
            Some(m) if m.role != Role::User => return invalid("last message must come from the user"),
            _ => {}
        }
        if self.max_completion_tokens == 0 {
            return invalid("max_completion_tokens must be positive");
        }
        Ok(())
    }

    /// Wire body for `POST …/chat/completions`.
    pub fn to_body(&self) -> Value {
        serde_json::to_value(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Option<Usage>,
}

fn is_truncation(finish_reason: &str) -> bool {
    matches!(finish_reason, "length" | "content_filter")
}

/// Identifies a call for scripting and logging. `key` is the candidate id
/// (or seed id for discovery); `alias` is the declaration name when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub stage: StageKind,
    pub key: String,
    pub alias: Option<String>,
    pub attempt: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest, ctx: &CallContext) -> Result<ChatResponse, LlmError>;
}

/// Single user message carrying the prompt with the stage's sampling settings.
pub fn stage_request(cfg: &StageConfig, prompt_body: &str) -> ChatRequest {
    ChatRequest {
        model: cfg.model.clone(),
        messages: vec![ChatMessage { role: Role::User, content: prompt_body.to_string() }],
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_completion_tokens: cfg.max_completion_tokens,
        reasoning_effort: cfg.reasoning_effort.map(|e| e.as_str().to_string()),
    }
}

/// Exponential backoff with symmetric jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_secs(1), factor: 2.0, jitter: 0.2, max_retries: 5 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let scale = if self.jitter > 0.0 { 1.0 + rng.gen_range(-self.jitter..=self.jitter) } else { 1.0 };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub url: String,
    #[serde(default = "default_chat_path")]
    pub path: String,
    /// Environment variable holding the secret; absent for open endpoints.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_s: u64,
}

fn default_chat_path() -> String {
    "/chat/completions".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_request_timeout() -> u64 {
    3600
}

impl EndpointConfig {
    pub fn chat_url(&self) -> String {
        format!("{}{}", self.url.trim_end_matches('/'), self.path)
    }
}

enum Attempt {
    Done(Result<ChatResponse, LlmError>),
    Retry(String),
}

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    url: String,
    auth_header: String,
    auth_value: Option<String>,
    retry: RetryPolicy,
    limiter: Semaphore,
    log: Option<Arc<JsonlLog>>,
}

impl HttpChatBackend {
    /// `secret` is sent as `Bearer <secret>` under the configured header.
    pub fn new(endpoint: &EndpointConfig, secret: Option<String>, concurrency: usize) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(endpoint.request_timeout_s)))
            .build();
        let auth_value = secret.map(|s| {
            if endpoint.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {s}")
            } else {
                s
            }
        });
        HttpChatBackend {
            agent: ureq::Agent::new_with_config(config),
            url: endpoint.chat_url(),
            auth_header: endpoint.auth_header.clone(),
            auth_value,
            retry: RetryPolicy::default(),
            limiter: Semaphore::new(concurrency),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_log(mut self, log: Arc<JsonlLog>) -> Self {
        self.log = Some(log);
        self
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut request = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(auth) = &self.auth_value {
            request = request.header(self.auth_header.as_str(), auth.as_str());
        }
        let response = {
            let _permit = self.limiter.acquire();
            request.send(body.to_string())
        };
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        self.log_exchange(body, Some(status), &text);
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Done(Err(LlmError::Rejected { status, body: text }));
        }
        Attempt::Done(decode_completion(&text))
    }

    fn log_exchange(&self, request: &Value, status: Option<u16>, response: &str) {
        if let Some(log) = &self.log {
            // headers, and therefore the secret, are never logged
            log.write(&json!({
                "ts": chrono::Utc::now().to_rfc3339(),
                "url": self.url,
                "request": request,
                "status": status,
                "response": response,
            }));
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, req: &ChatRequest, _ctx: &CallContext) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let body = req.to_body();
        let mut rng = rand::thread_rng();
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(reason) => {
                    if retries >= self.retry.max_retries {
                        return Err(LlmError::BackendUnavailable { attempts: retries + 1, last_error: reason });
                    }
                    std::thread::sleep(self.retry.delay(retries, &mut rng));
                    retries += 1;
                }
            }
        }
    }
}

/// Decodes a chat-completions response body, taking the first choice.
pub fn decode_completion(text: &str) -> Result<ChatResponse, LlmError> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::Protocol(format!("non-JSON body: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| LlmError::Protocol("missing choices[0]".into()))?;
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("stop").to_string();
    let content = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => return Err(LlmError::Protocol(format!("message.content is not a string: {other}"))),
    };
    if is_truncation(&finish_reason) {
        return Err(LlmError::Truncated { finish_reason });
    }
    if content.is_empty() {
        return Err(LlmError::Protocol(format!("empty content with finish_reason={finish_reason}")));
    }
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Ok(ChatResponse { content, finish_reason, usage })
}

/// One canned response. `key` matches the call's key or alias, or `*` for
/// any; a missing `attempt` matches every attempt; a missing `model` every
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub stage: StageKind,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
    /// `"unavailable"` or `"protocol"` to simulate a failing backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub default: String,
    #[serde(default)]
    pub responses: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Script, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub stage: StageKind,
    pub key: String,
    pub attempt: u32,
    pub model: String,
    pub prompt: String,
}

/// Deterministic backend replaying a [`Script`]. Every lookup succeeds; the
/// script default is the last resort.
pub struct ScriptedBackend {
    // (stage, key) -> entries in script order
    index: HashMap<(StageKind, String), Vec<ScriptEntry>>,
    default: String,
    calls: Mutex<Vec<CallRecord>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut index: HashMap<(StageKind, String), Vec<ScriptEntry>> = HashMap::new();
        for entry in script.responses {
            index.entry((entry.stage, entry.key.clone())).or_default().push(entry);
        }
        ScriptedBackend { index, default: script.default, calls: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    fn lookup(&self, req: &ChatRequest, ctx: &CallContext) -> Option<&ScriptEntry> {
        let keys = std::iter::once(ctx.key.as_str()).chain(ctx.alias.as_deref()).chain(std::iter::once("*"));
        for key in keys {
            let Some(entries) = self.index.get(&(ctx.stage, key.to_string())) else { continue };
            let model_ok = |e: &&ScriptEntry| e.model.as_deref().is_none_or(|m| m == req.model);
            let exact = entries.iter().filter(model_ok).find(|e| e.attempt == Some(ctx.attempt));
            let any = entries.iter().filter(model_ok).find(|e| e.attempt.is_none());
            if let Some(e) = exact.or(any) {
                return Some(e);
            }
        }
        None
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest, ctx: &CallContext) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        self.calls.lock().unwrap().push(CallRecord {
            stage: ctx.stage,
            key: ctx.key.clone(),
            attempt: ctx.attempt,
            model: req.model.clone(),
            prompt: req.messages.last().map(|m| m.content.clone()).unwrap_or_default(),
        });
        let (text, finish_reason, error) = match self.lookup(req, ctx) {
            Some(e) => (e.text.clone(), e.finish_reason.clone().unwrap_or_else(|| "stop".into()), e.error.clone()),
            None => (self.default.clone(), "stop".into(), None),
        };
        match error.as_deref() {
            Some("unavailable") => {
                return Err(LlmError::BackendUnavailable { attempts: 1, last_error: "scripted outage".into() })
            }
            Some(other) => return Err(LlmError::Protocol(format!("scripted error {other}"))),
            None => {}
        }
        if is_truncation(&finish_reason) {
            return Err(LlmError::Truncated { finish_reason });
        }
        Ok(ChatResponse { content: text, finish_reason, usage: None })
    }
}
