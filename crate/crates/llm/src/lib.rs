//! Trust semantics extraction through a remote chat-completion endpoint.
//!
//! The engine sends the record window to an OpenAI-style
//! `POST /v1/chat/completions` endpoint and expects the assistant message to
//! be a JSON document of the form
//!
//! ```json
//! {"state": "trusted",
//!  "communication-related": "packet loss rate shows a normal trend, throughput shows a decreasing trend",
//!  "computation-related": "accuracy shows a normal trend, task processing speed shows a normal trend"}
//! ```
//!
//! The phrase vocabulary is closed. Anything else is a schema violation.
//! After `max_retries` failed attempts the deterministic engine answers
//! instead and the result is tagged [`Provenance::Fallback`].

use std::collections::HashMap;
use std::fmt;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::json;

use twotsd_core::domain::{
    CommTrends, CompTrends, DeviceId, PerformanceRecord, TaskType, TimeWindow, Timestamp, Trend, TrustSemantics,
    TrustState,
};
use twotsd_core::semantics::{DeterministicEngine, SemanticsEngine, SemanticsError};

pub const CREDENTIAL_ENV: &str = "TWOTSD_REMOTE_KEY";
pub const TEMPLATE_V1: &str = "trust-semantics-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteEngineConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub prompt_template: String,
    pub max_in_flight: usize,
}

impl Default for RemoteEngineConfig {
    fn default() -> Self {
        RemoteEngineConfig {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            timeout_s: 30.0,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            prompt_template: TEMPLATE_V1.into(),
            max_in_flight: 4,
        }
    }
}

impl RemoteEngineConfig {
    pub fn validate(&self) -> Result<(), RemoteError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(RemoteError::Config("timeout_s must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(RemoteError::Config("max_in_flight must be >= 1".into()));
        }
        if self.prompt_template != TEMPLATE_V1 {
            return Err(RemoteError::Config(format!(
                "unknown prompt template {:?}",
                self.prompt_template
            )));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(RemoteError::Config("endpoint must be an http(s) URL".into()));
        }
        Ok(())
    }
}

/// API key. Never printed.
#[derive(Clone)]
pub struct Credential(String);

impl Credential {
    pub fn new(key: impl Into<String>) -> Self {
        Credential(key.into())
    }

    pub fn from_env() -> Result<Self, RemoteError> {
        match std::env::var(CREDENTIAL_ENV) {
            Ok(k) if !k.trim().is_empty() => Ok(Credential(k)),
            _ => Err(RemoteError::Config(format!("{CREDENTIAL_ENV} is not set"))),
        }
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RemoteError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("rate limited")]
    RateLimited,
    #[error("response violates the output schema: {0}")]
    SchemaViolation(String),
    #[error("server error (HTTP {0})")]
    Server(u16),
    #[error("request rejected (HTTP {0})")]
    Rejected(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("config: {0}")]
    Config(String),
}

impl RemoteError {
    pub fn code(&self) -> &'static str {
        match self {
            RemoteError::Timeout => "timeout",
            RemoteError::Auth(_) => "auth",
            RemoteError::RateLimited => "rate_limit",
            RemoteError::SchemaViolation(_) => "schema_violation",
            RemoteError::Server(_) => "server",
            RemoteError::Rejected(_) => "rejected",
            RemoteError::Transport(_) => "transport",
            RemoteError::Config(_) => "config",
        }
    }

    /// Auth failures and client errors will not improve on retry.
    pub fn retryable(&self) -> bool {
        matches!(
            self,
            RemoteError::Timeout
                | RemoteError::RateLimited
                | RemoteError::SchemaViolation(_)
                | RemoteError::Server(_)
                | RemoteError::Transport(_)
        )
    }
}

/// Where a semantics value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Remote { attempts: u32 },
    Fallback { reason: String, attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSemantics {
    pub semantics: TrustSemantics,
    pub provenance: Provenance,
}

// ---------------------------------------------------------------------------
// Phrase parsing

fn parse_trend_word(w: &str) -> Option<Trend> {
    match w {
        "increasing" => Some(Trend::Increasing),
        "decreasing" => Some(Trend::Decreasing),
        "normal" => Some(Trend::Normal),
        _ => None,
    }
}

/// Parses one clause like `throughput shows a decreasing trend` into
/// `(subject, trend)`.
fn parse_clause(clause: &str) -> Result<(&str, Trend), RemoteError> {
    let bad = || RemoteError::SchemaViolation(format!("unrecognized clause {clause:?}"));
    let (subject, rest) = clause.split_once(" shows ").ok_or_else(bad)?;
    let rest = rest
        .strip_prefix("an ")
        .or_else(|| rest.strip_prefix("a "))
        .ok_or_else(bad)?;
    let word = rest.strip_suffix(" trend").ok_or_else(bad)?;
    Ok((subject.trim(), parse_trend_word(word).ok_or_else(bad)?))
}

fn parse_pair(text: &str, first: &str, second: &str) -> Result<(Trend, Trend), RemoteError> {
    let clauses: Vec<&str> = text.trim().trim_end_matches('.').split(',').map(str::trim).collect();
    if clauses.len() != 2 {
        return Err(RemoteError::SchemaViolation(format!(
            "expected two clauses, got {text:?}"
        )));
    }
    let mut a = None;
    let mut b = None;
    for c in clauses {
        let (subject, t) = parse_clause(c)?;
        let slot = if subject == first {
            &mut a
        } else if subject == second {
            &mut b
        } else {
            return Err(RemoteError::SchemaViolation(format!("unknown subject {subject:?}")));
        };
        if slot.replace(t).is_some() {
            return Err(RemoteError::SchemaViolation(format!("duplicate subject {subject:?}")));
        }
    }
    Ok((a.expect("two distinct subjects"), b.expect("two distinct subjects")))
}

/// `packet loss rate shows a normal trend, throughput shows a decreasing trend`
pub fn parse_communication(text: &str) -> Result<CommTrends, RemoteError> {
    let (loss_rate, throughput) = parse_pair(text, "packet loss rate", "throughput")?;
    Ok(CommTrends { throughput, loss_rate })
}

/// `accuracy shows a normal trend, task processing speed shows a normal trend`
pub fn parse_computation(text: &str) -> Result<CompTrends, RemoteError> {
    let (accuracy, proc_speed) = parse_pair(text, "accuracy", "task processing speed")?;
    Ok(CompTrends { accuracy, proc_speed })
}

pub fn parse_state(text: &str) -> Result<TrustState, RemoteError> {
    match text.trim() {
        "trusted" => Ok(TrustState::Trusted),
        "untrusted" => Ok(TrustState::Untrusted),
        "insufficient_data" => Ok(TrustState::InsufficientData),
        other => Err(RemoteError::SchemaViolation(format!("unknown state {other:?}"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputDoc {
    state: String,
    #[serde(rename = "communication-related")]
    communication: String,
    #[serde(rename = "computation-related")]
    computation: String,
}

/// Validates the model's answer and combines it with the locally known
/// window facts.
pub fn parse_output(
    content: &str,
    device: &DeviceId,
    task_type: &TaskType,
    records: &[PerformanceRecord],
    now: Timestamp,
) -> Result<TrustSemantics, RemoteError> {
    let body = strip_code_fence(content);
    let doc: OutputDoc =
        serde_json::from_str(body).map_err(|e| RemoteError::SchemaViolation(format!("not the output document: {e}")))?;
    let state = parse_state(&doc.state)?;
    let comm = parse_communication(&doc.communication)?;
    let comp = parse_computation(&doc.computation)?;
    let window = match (records.first(), records.last()) {
        (Some(f), Some(l)) => Some(TimeWindow {
            from: f.at(),
            to: l.at(),
        }),
        _ => None,
    };
    TrustSemantics::new(
        device.clone(),
        task_type.clone(),
        state,
        comm,
        comp,
        window,
        now,
        records.len() as u64,
    )
    .map_err(|e| RemoteError::SchemaViolation(e.to_string()))
}

fn strip_code_fence(s: &str) -> &str {
    let t = s.trim();
    let Some(inner) = t.strip_prefix("```") else { return t };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

// ---------------------------------------------------------------------------
// Prompt

const SYSTEM_PROMPT: &str = "You assess the trustworthiness of an edge device for one task type \
from its collaboration history. Reply with a single JSON object and nothing else, with exactly \
these keys:\n\
\"state\": one of \"trusted\", \"untrusted\", \"insufficient_data\";\n\
\"communication-related\": \"packet loss rate shows a <T> trend, throughput shows a <T> trend\";\n\
\"computation-related\": \"accuracy shows a <T> trend, task processing speed shows a <T> trend\";\n\
where each <T> is one of increasing, decreasing, normal.\n\
Use insufficient_data with all trends normal when there are fewer than {n_min} records. \
A device is trusted when at least {threshold_pct}% of its records are satisfied.";

/// Builds the chat messages for one extraction.
pub fn build_messages(
    device: &DeviceId,
    task_type: &TaskType,
    records: &[PerformanceRecord],
    n_min: usize,
    trust_threshold: f64,
) -> serde_json::Value {
    let system = SYSTEM_PROMPT
        .replace("{n_min}", &n_min.to_string())
        .replace("{threshold_pct}", &format!("{}", trust_threshold * 100.0));
    let mut user = format!(
        "device: {device}\ntask_type: {task_type}\nrecords (oldest first):\n\
         time_ms,throughput_mbps,loss_rate,proc_speed_mbps,accuracy,result\n"
    );
    for r in records {
        user.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.at().millis(),
            r.throughput_mbps(),
            r.loss_rate(),
            r.proc_speed_mbps(),
            r.accuracy(),
            r.verdict().as_str()
        ));
    }
    json!([
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ])
}

// ---------------------------------------------------------------------------
// Engine

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self, cap: usize) -> Permit<'_> {
        let mut n = self.count.lock();
        while *n >= cap {
            self.freed.wait(&mut n);
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RemoteStats {
    pub requests: u64,
    pub remote_ok: u64,
    pub fallbacks: u64,
    pub peak_in_flight: usize,
}

pub struct RemoteEngine {
    cfg: RemoteEngineConfig,
    credential: Option<Credential>,
    client: reqwest::blocking::Client,
    fallback: DeterministicEngine,
    in_flight: InFlight,
    stats: Mutex<RemoteStats>,
    provenance: Mutex<HashMap<(DeviceId, TaskType), Provenance>>,
}

impl fmt::Debug for RemoteEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEngine")
            .field("cfg", &self.cfg)
            .field("credential", &self.credential)
            .finish_non_exhaustive()
    }
}

impl RemoteEngine {
    /// `credential` is sent as a bearer token when present.
    pub fn new(
        cfg: RemoteEngineConfig,
        credential: Option<Credential>,
        fallback: DeterministicEngine,
    ) -> Result<Self, RemoteError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| RemoteError::Config(e.to_string()))?;
        Ok(RemoteEngine {
            cfg,
            credential,
            client,
            fallback,
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
            stats: Mutex::new(RemoteStats::default()),
            provenance: Mutex::new(HashMap::new()),
        })
    }

    /// Reads the credential from `TWOTSD_REMOTE_KEY`.
    pub fn from_env(cfg: RemoteEngineConfig, fallback: DeterministicEngine) -> Result<Self, RemoteError> {
        Self::new(cfg, Some(Credential::from_env()?), fallback)
    }

    pub fn config(&self) -> &RemoteEngineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> RemoteStats {
        *self.stats.lock()
    }

    /// Provenance of the latest extraction for a pair.
    pub fn provenance_of(&self, device: &DeviceId, task_type: &TaskType) -> Option<Provenance> {
        self.provenance
            .lock()
            .get(&(device.clone(), task_type.clone()))
            .cloned()
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .cfg
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.cfg.backoff_max_ms);
        Duration::from_millis(ms)
    }

    fn call_once(&self, messages: &serde_json::Value) -> Result<String, RemoteError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
            "response_format": {"type": "json_object"},
        });
        let mut req = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(c) = &self.credential {
            req = req.bearer_auth(&c.0);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                RemoteError::Timeout
            } else {
                RemoteError::Transport(e.without_url().to_string())
            }
        })?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(RemoteError::Auth(status)),
            429 => return Err(RemoteError::RateLimited),
            500..=599 => return Err(RemoteError::Server(status)),
            _ => return Err(RemoteError::Rejected(status)),
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                RemoteError::Timeout
            } else {
                RemoteError::Transport(e.without_url().to_string())
            }
        })?;
        let env: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RemoteError::SchemaViolation(format!("envelope: {e}")))?;
        env.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| RemoteError::SchemaViolation("envelope lacks choices[0].message.content".into()))
    }

    /// Remote extraction with retries and no fallback. Returns the attempt
    /// count with the result.
    pub fn extract_remote(
        &self,
        device: &DeviceId,
        task_type: &TaskType,
        records: &[PerformanceRecord],
        now: Timestamp,
    ) -> Result<(TrustSemantics, u32), (RemoteError, u32)> {
        let engine_cfg = self.fallback.config();
        let messages = build_messages(
            device,
            task_type,
            records,
            engine_cfg.state.n_min,
            engine_cfg.state.trust_threshold,
        );
        let _permit = self.in_flight.acquire(self.cfg.max_in_flight);
        {
            let mut s = self.stats.lock();
            s.peak_in_flight = s.peak_in_flight.max(*self.in_flight.count.lock());
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.lock().requests += 1;
            let result = self
                .call_once(&messages)
                .and_then(|content| parse_output(&content, device, task_type, records, now));
            match result {
                Ok(ts) => return Ok((ts, attempt)),
                Err(e) => {
                    debug!("remote extraction attempt {attempt} for {device}/{task_type}: {e}");
                    if !e.retryable() || attempt > self.cfg.max_retries {
                        return Err((e, attempt));
                    }
                    thread::sleep(self.backoff(attempt - 1));
                }
            }
        }
    }

    /// Remote extraction, falling back to the deterministic engine.
    pub fn extract_tagged(
        &self,
        device: &DeviceId,
        task_type: &TaskType,
        records: &[PerformanceRecord],
        now: Timestamp,
    ) -> Result<TaggedSemantics, SemanticsError> {
        let tagged = match self.extract_remote(device, task_type, records, now) {
            Ok((semantics, attempts)) => {
                self.stats.lock().remote_ok += 1;
                TaggedSemantics {
                    semantics,
                    provenance: Provenance::Remote { attempts },
                }
            }
            Err((e, attempts)) => {
                warn!("remote extraction for {device}/{task_type} failed ({}); using deterministic engine", e.code());
                self.stats.lock().fallbacks += 1;
                TaggedSemantics {
                    semantics: self.fallback.extract(device, task_type, records, now)?,
                    provenance: Provenance::Fallback {
                        reason: e.code().to_string(),
                        attempts,
                    },
                }
            }
        };
        self.provenance
            .lock()
            .insert((device.clone(), task_type.clone()), tagged.provenance.clone());
        Ok(tagged)
    }
}

impl SemanticsEngine for RemoteEngine {
    fn extract(
        &self,
        device: &DeviceId,
        task_type: &TaskType,
        records: &[PerformanceRecord],
        now: Timestamp,
    ) -> Result<TrustSemantics, SemanticsError> {
        self.extract_tagged(device, task_type, records, now)
            .map(|t| t.semantics)
    }

    fn name(&self) -> &str {
        "remote"
    }
}
