//! Uniform completion interface over model backends.
//!
//! A [`Gateway`] routes [`CompletionRequest`]s to the backend configured
//! for each role (base or optimizer), retries transient failures with
//! exponential backoff, enforces a per-role in-flight limit, and records
//! every attempt and every token to [`crate::telemetry::Telemetry`].
//!
//! Two backends ship with the crate: [`HttpProvider`] speaks the common
//! `/chat/completions` wire protocol, and [`ScriptedProvider`] replays a
//! fixed list of matcher/response entries for offline runs and tests.
//! Token counts come from the provider when reported; otherwise they are
//! estimated as `ceil(chars / 4)` and flagged as estimated in the ledger.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::Telemetry;

/// Which of the two models a request is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Optimizer,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Base => write!(f, "base"),
            Role::Optimizer => write!(f, "optimizer"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: Role,
    /// Ordered `(speaker, text)` pairs; speakers follow the wire protocol
    /// ("user", "system", ...).
    pub messages: Vec<(String, String)>,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    /// Free-form tag correlating this call with trace events.
    pub request_tag: String,
}

impl CompletionRequest {
    pub fn user(role: Role, text: &str, temperature: f64, tag: &str) -> Self {
        Self {
            role,
            messages: vec![("user".to_string(), text.to_string())],
            temperature,
            max_output_tokens: None,
            request_tag: tag.to_string(),
        }
    }

    /// The request as one string, used for matching and token estimation.
    pub fn rendered_text(&self) -> String {
        self.messages
            .iter()
            .map(|(_, text)| text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Token usage of a single completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Reasoning-channel share of `output_tokens`, when the provider
    /// separates it.
    pub reasoning_tokens: u64,
    /// Always 1 for a single result; summing usages yields call counts.
    pub api_calls: u64,
    /// True when the counts were estimated rather than provider-reported.
    pub estimated: bool,
}

#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Usage,
    pub provider_id: String,
    pub latency_ms: u64,
}

/// Usage as reported by a provider.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReportedUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub reasoning_tokens: u64,
}

/// Raw single-attempt response from a backend.
#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub text: String,
    /// `None` means the gateway estimates token counts.
    pub usage: Option<ReportedUsage>,
}

/// Error from a single backend attempt.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient failure worth retrying (rate limits, 5xx, timeouts).
    #[error("{message}")]
    Retryable {
        status: Option<u16>,
        message: String,
    },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("{0}")]
    Fatal(String),
    /// A scripted backend ran out of matching entries; surfaced loudly
    /// because it signals a broken test script.
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
}

/// A model backend able to serve one completion attempt.
///
/// Implementations must be safe to call from multiple threads; the
/// gateway layers retry, backoff, concurrency limiting, and telemetry on
/// top.
pub trait Backend: Send + Sync {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError>;
    /// Short identifier recorded with each call.
    fn id(&self) -> &str;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, next_attempt: u32) -> Duration {
        let shift = next_attempt.saturating_sub(2).min(16);
        let ms = self.base_delay_ms.saturating_mul(1 << shift);
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no provider configured for role {0}")]
    MissingProvider(Role),
    #[error("request has no messages")]
    EmptyRequest,
    #[error("authentication failed for role {role}: {message}")]
    Auth { role: Role, message: String },
    #[error("transport failed for role {role} after {attempts} attempts: {last}")]
    Exhausted {
        role: Role,
        attempts: u32,
        last: String,
        attempt_log: Vec<String>,
    },
    #[error("{0}")]
    Fatal(String),
    #[error("script exhausted for role {role}: {message}")]
    ScriptExhausted { role: Role, message: String },
}

impl GatewayError {
    /// Errors that evaluation treats as a per-sample failure rather than
    /// an aborted run.
    pub fn is_sample_recoverable(&self) -> bool {
        matches!(self, GatewayError::Exhausted { .. })
    }
}

struct Slot {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Semaphore,
}

/// Completion front door: per-role backends with retry and accounting.
pub struct Gateway {
    base: Option<Slot>,
    optimizer: Option<Slot>,
    telemetry: Arc<Telemetry>,
}

/// Default per-role in-flight request limit.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

impl Gateway {
    pub fn new(telemetry: Arc<Telemetry>) -> Self {
        Self {
            base: None,
            optimizer: None,
            telemetry,
        }
    }

    pub fn with_role(self, role: Role, backend: Arc<dyn Backend>) -> Self {
        self.with_role_config(role, backend, RetryPolicy::default(), DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_role_config(
        mut self,
        role: Role,
        backend: Arc<dyn Backend>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        let slot = Slot {
            backend,
            retry,
            limiter: Semaphore::new(max_in_flight.max(1)),
        };
        match role {
            Role::Base => self.base = Some(slot),
            Role::Optimizer => self.optimizer = Some(slot),
        }
        self
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.telemetry
    }

    fn slot(&self, role: Role) -> Option<&Slot> {
        match role {
            Role::Base => self.base.as_ref(),
            Role::Optimizer => self.optimizer.as_ref(),
        }
    }

    /// Run one completion with retry, backoff, and full attempt logging.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let role = request.role;
        let slot = self.slot(role).ok_or(GatewayError::MissingProvider(role))?;
        let _permit = slot.limiter.acquire();

        let mut attempt_log = Vec::new();
        let max = slot.retry.max_attempts.max(1);
        for attempt in 1..=max {
            let started = Instant::now();
            match slot.backend.attempt(request) {
                Ok(response) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    let usage = finalize_usage(request, &response);
                    self.telemetry.record_success(
                        role,
                        &request.request_tag,
                        attempt,
                        &usage,
                        slot.backend.id(),
                        latency_ms,
                    );
                    return Ok(CompletionResult {
                        text: response.text,
                        usage,
                        provider_id: slot.backend.id().to_string(),
                        latency_ms,
                    });
                }
                Err(BackendError::Retryable { status, message }) => {
                    let detail = match status {
                        Some(code) => format!("HTTP {code}: {message}"),
                        None => message,
                    };
                    self.telemetry.record_failed_attempt(
                        role,
                        &request.request_tag,
                        attempt,
                        false,
                        &detail,
                    );
                    attempt_log.push(detail);
                    if attempt < max {
                        std::thread::sleep(slot.retry.delay_before(attempt + 1));
                    }
                }
                Err(BackendError::Auth(message)) => {
                    self.telemetry.record_failed_attempt(
                        role,
                        &request.request_tag,
                        attempt,
                        true,
                        &message,
                    );
                    return Err(GatewayError::Auth { role, message });
                }
                Err(BackendError::Fatal(message)) => {
                    self.telemetry.record_failed_attempt(
                        role,
                        &request.request_tag,
                        attempt,
                        true,
                        &message,
                    );
                    return Err(GatewayError::Fatal(message));
                }
                Err(BackendError::ScriptExhausted(message)) => {
                    self.telemetry.record_failed_attempt(
                        role,
                        &request.request_tag,
                        attempt,
                        true,
                        &message,
                    );
                    return Err(GatewayError::ScriptExhausted { role, message });
                }
            }
        }
        Err(GatewayError::Exhausted {
            role,
            attempts: max,
            last: attempt_log.last().cloned().unwrap_or_default(),
            attempt_log,
        })
    }
}

/// `ceil(chars / 4)` fallback when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

fn finalize_usage(request: &CompletionRequest, response: &BackendResponse) -> Usage {
    match response.usage {
        Some(reported) => Usage {
            input_tokens: reported.input_tokens,
            output_tokens: reported.output_tokens,
            reasoning_tokens: reported.reasoning_tokens,
            api_calls: 1,
            estimated: false,
        },
        None => Usage {
            input_tokens: estimate_tokens(&request.rendered_text()),
            output_tokens: estimate_tokens(&response.text),
            reasoning_tokens: 0,
            api_calls: 1,
            estimated: true,
        },
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// How a script entry decides whether it answers a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    /// Accepts any request.
    Any,
    /// Accepts requests whose rendered text contains the needle.
    Substring(String),
}

impl Matcher {
    pub fn accepts(&self, rendered: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Substring(needle) => rendered.contains(needle),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptEntry {
    pub fn any(response: &str) -> Self {
        Self {
            matcher: Matcher::Any,
            response: response.to_string(),
        }
    }

    pub fn keyed(needle: &str, response: &str) -> Self {
        Self {
            matcher: Matcher::Substring(needle.to_string()),
            response: response.to_string(),
        }
    }
}

/// Deterministic backend that replays a fixed script.
///
/// Each call consumes the first unconsumed entry whose matcher accepts
/// the rendered request; running out of matching entries is an error so
/// broken test scripts fail loudly. Token counts are always estimated.
pub struct ScriptedProvider {
    id: String,
    state: Mutex<ScriptState>,
}

struct ScriptState {
    entries: Vec<ScriptEntry>,
    consumed: Vec<bool>,
}

impl ScriptedProvider {
    pub fn new(id: &str, entries: Vec<ScriptEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        Self {
            id: id.to_string(),
            state: Mutex::new(ScriptState { entries, consumed }),
        }
    }

    /// FIFO script: every entry answers any request, in order.
    pub fn in_order(id: &str, responses: Vec<String>) -> Self {
        Self::new(id, responses.iter().map(|r| ScriptEntry::any(r)).collect())
    }

    /// Mark the first `n` entries consumed. Used when resuming a run so
    /// the script picks up where the interrupted run's ledger left off;
    /// assumes the original run consumed entries in listed order, which
    /// holds for in-order scripts.
    pub fn advance(&self, n: usize) {
        let mut state = self.state.lock().expect("script lock");
        let n = n.min(state.entries.len());
        for flag in state.consumed.iter_mut().take(n) {
            *flag = true;
        }
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("script lock");
        state.consumed.iter().filter(|c| !**c).count()
    }
}

impl Backend for ScriptedProvider {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        let rendered = request.rendered_text();
        let mut state = self.state.lock().expect("script lock");
        let hit = state
            .entries
            .iter()
            .enumerate()
            .position(|(i, entry)| !state.consumed[i] && entry.matcher.accepts(&rendered));
        match hit {
            Some(i) => {
                state.consumed[i] = true;
                Ok(BackendResponse {
                    text: state.entries[i].response.clone(),
                    usage: None,
                })
            }
            None => Err(BackendError::ScriptExhausted(format!(
                "no unconsumed entry matches request {:?}",
                request.request_tag
            ))),
        }
    }

    fn id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completion backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// API root, e.g. `https://api.deepseek.com`; `/chat/completions` is
    /// appended.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

/// Live backend speaking the de-facto `/chat/completions` schema.
pub struct HttpProvider {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpProvider {
    pub fn new(cfg: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Fatal(format!("http client: {e}")))?;
        let id = format!("http:{}", cfg.model);
        Ok(Self { cfg, client, id })
    }
}

impl Backend for HttpProvider {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|(speaker, text)| serde_json::json!({"role": speaker, "content": text}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = serde_json::json!(max);
        }
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Retryable {
            status: None,
            message: format!("transport: {e}"),
        })?;
        let status = response.status();
        let status_code = status.as_u16();
        if status_code == 401 || status_code == 403 {
            return Err(BackendError::Auth(format!("HTTP {status_code}")));
        }
        if status_code == 408 || status_code == 429 || status.is_server_error() {
            return Err(BackendError::Retryable {
                status: Some(status_code),
                message: response.text().unwrap_or_default(),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!(
                "HTTP {status_code}: {}",
                response.text().unwrap_or_default()
            )));
        }
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")))?;
        // Only the content channel feeds extraction; a separate reasoning
        // channel (e.g. `reasoning_content`) is deliberately ignored.
        let text = payload["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?
            .to_string();
        let usage = payload.get("usage").map(|u| ReportedUsage {
            input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
            output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
            reasoning_tokens: u["completion_tokens_details"]["reasoning_tokens"]
                .as_u64()
                .unwrap_or(0),
        });
        Ok(BackendResponse { text, usage })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// Counting semaphore (per-role in-flight limit)
// ---------------------------------------------------------------------------

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut available = self.permits.lock().expect("semaphore lock");
        while *available == 0 {
            available = self.cv.wait(available).expect("semaphore wait");
        }
        *available -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut available = self.0.permits.lock().expect("semaphore lock");
        *available += 1;
        self.0.cv.notify_one();
    }
}
