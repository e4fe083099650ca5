//! Draft generation through a chat-completion style HTTP endpoint.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "temperature": 0.35, "messages": [
//!   {"role": "system", "content": "<format rules>"},
//!   {"role": "user", "content": "<problem, strategy, earlier drafts>"}]}
//! ```
//!
//! The response must carry `choices[0].message.content` holding a draft in
//! the `step: ...` / `#### answer` wire format. Anything that does not parse
//! or breaks the five-word step rule is retried, then rejected.
//!
//! The bearer token, if any, is read from the environment variable named in
//! the config (`DRAFT_RL_API_KEY` by default).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use draftrl::config::BackendSettings;
use draftrl::draft::{parse_draft, render_draft, validate_draft, Draft, DraftBody, GenerationMeta, MAX_STEP_WORDS};
use draftrl::env::Query;
use draftrl::orchestrator::{DraftGenerator, GenerationRequest};
use draftrl::policy::StrategyHint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("response rejected ({reason}): {text:?}")]
    FormatRejected { reason: String, text: String },
    #[error("invalid backend config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Send the slot temperature with the request.
    pub temperature_passthrough: bool,
    pub max_in_flight: usize,
    pub api_key: Option<String>,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            temperature_passthrough: true,
            max_in_flight: 4,
            api_key: None,
        }
    }

    /// Builds the config from the `[backend]` section, reading the API key
    /// from the environment.
    pub fn from_settings(s: &BackendSettings) -> Result<Self, BackendError> {
        if !(s.timeout_secs > 0.0 && s.timeout_secs.is_finite()) {
            return Err(BackendError::BadConfig("timeout_secs must be > 0".into()));
        }
        Ok(Self {
            endpoint: s.endpoint.clone(),
            model: s.model.clone(),
            timeout: Duration::from_secs_f64(s.timeout_secs),
            max_retries: s.max_retries,
            temperature_passthrough: true,
            max_in_flight: s.max_in_flight.max(1),
            api_key: std::env::var(&s.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

pub fn system_prompt() -> String {
    format!(
        "Solve the arithmetic chain step by step.\n\
         Write each step on its own line starting with `step: `. \
         Every step must have between 1 and {MAX_STEP_WORDS} words.\n\
         End with one line `#### <answer>` holding only the final integer.\n\
         Output nothing else."
    )
}

/// The request for one draft slot.
pub fn build_request(
    cfg: &BackendConfig,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
) -> ChatRequest {
    let mut user = format!("Problem: {}\nStrategy: {}\n", query.prompt, hint.description);
    if !history.is_empty() {
        user.push_str("Your earlier drafts (try something different):\n");
        for (i, d) in history.iter().enumerate() {
            user.push_str(&format!("--- draft {}\n{}\n", i + 1, render_draft(&d.body)));
        }
    }
    ChatRequest {
        model: cfg.model.clone(),
        temperature: cfg.temperature_passthrough.then_some(temperature),
        messages: vec![
            ChatMessage { role: "system".into(), content: system_prompt() },
            ChatMessage { role: "user".into(), content: user },
        ],
    }
}

/// Parses and validates the assistant text.
pub fn accept_response(text: &str) -> Result<DraftBody, BackendError> {
    let body = parse_draft(text).map_err(|e| BackendError::FormatRejected {
        reason: e.to_string(),
        text: text.to_string(),
    })?;
    let report = validate_draft(&body);
    if !report.valid {
        let reason = report
            .violations
            .iter()
            .map(|(site, why)| format!("{site}: {why:?}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(BackendError::FormatRejected { reason, text: text.to_string() });
    }
    Ok(body)
}

fn make_agent(cfg: &BackendConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn call(agent: &ureq::Agent, cfg: &BackendConfig, request: &ChatRequest) -> Result<String, BackendError> {
    let mut req = agent.post(&cfg.endpoint).header("Content-Type", "application/json");
    if let Some(key) = &cfg.api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(request)
        .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
    let status = resp.status();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
    if !status.is_success() {
        return Err(BackendError::BackendUnavailable(format!("HTTP {}", status.as_u16())));
    }
    let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::FormatRejected {
        reason: format!("not a chat completion: {e}"),
        text: text.clone(),
    })?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| BackendError::FormatRejected { reason: "no choices".into(), text })
}

fn generate_with(
    agent: &ureq::Agent,
    cfg: &BackendConfig,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
) -> Result<DraftBody, BackendError> {
    let request = build_request(cfg, query, history, hint, temperature);
    let mut last = BackendError::BackendUnavailable("no attempt made".into());
    for attempt in 0..=cfg.max_retries {
        match call(agent, cfg, &request).and_then(|text| accept_response(&text)) {
            Ok(body) => return Ok(body),
            Err(e) => {
                log::warn!("backend attempt {} of {} failed: {e}", attempt + 1, cfg.max_retries + 1);
                last = e;
            }
        }
    }
    Err(last)
}

/// One validated draft for `query`.
pub fn llm_generate(
    cfg: &BackendConfig,
    agent_id: usize,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
) -> Result<Draft, BackendError> {
    let body = generate_with(&make_agent(cfg), cfg, query, history, hint, temperature)?;
    Ok(Draft {
        agent_id,
        draft_index: hint.strategy_id,
        body,
        meta: GenerationMeta {
            temperature,
            strategy_id: hint.strategy_id,
            history_len: history.len(),
            seed: 0,
        },
    })
}

/// Counting semaphore bounding requests in flight.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// [`DraftGenerator`] backed by the HTTP endpoint.
pub struct HttpGenerator {
    cfg: BackendConfig,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl HttpGenerator {
    pub fn new(cfg: BackendConfig) -> Self {
        Self {
            agent: make_agent(&cfg),
            limiter: Limiter { free: Mutex::new(cfg.max_in_flight.max(1)), cv: Condvar::new() },
            cfg,
        }
    }
}

impl DraftGenerator for HttpGenerator {
    fn generate(&self, r: &GenerationRequest<'_>) -> Result<DraftBody, String> {
        let _permit = self.limiter.acquire();
        generate_with(&self.agent, &self.cfg, r.query, r.history, r.hint, r.temperature).map_err(|e| e.to_string())
    }
}
