//! Chat-completion gateway with per-agent routing, record/replay cassettes
//! and usage accounting.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::estimate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Rewriter,
    ViewGenerator,
    Planner,
    SqlGenerator,
    Revisor,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Rewriter,
        AgentRole::ViewGenerator,
        AgentRole::Planner,
        AgentRole::SqlGenerator,
        AgentRole::Revisor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Rewriter => "rewriter",
            AgentRole::ViewGenerator => "view_generator",
            AgentRole::Planner => "planner",
            AgentRole::SqlGenerator => "sql_generator",
            AgentRole::Revisor => "revisor",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown agent role {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: MessageRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: MessageRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: MessageRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub agent_role: AgentRole,
    pub messages: Vec<ChatMessage>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role != MessageRole::System => {
                Err(GatewayError::InvalidRequest("first message must be a system message".into()))
            }
            Some(_) => Ok(()),
        }
    }

    /// Hex SHA-256 over the canonical JSON of role, messages and model.
    pub fn cassette_key(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            agent_role: AgentRole,
            messages: &'a [ChatMessage],
            model: &'a str,
        }
        let canonical = serde_json::to_vec(&Canonical {
            agent_role: self.agent_role,
            messages: &self.messages,
            model: &self.params.model,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn input_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    pub fn estimate(request: &ChatRequest, content: &str) -> Self {
        Self {
            input_tokens: estimate_tokens(&request.input_text()) as u64,
            output_tokens: estimate_tokens(content) as u64,
            estimated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    /// Latency recorded by the backend; replayed calls report the original.
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
    #[error("replay miss for request {0}")]
    ReplayMiss(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("replay miss: no cassette entry for request {key}")]
    ReplayMiss { key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
    fn describe(&self) -> String;
}

// ---------------------------------------------------------------------------
// Remote backend

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiCompatBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl OpenAiCompatBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl ChatBackend for OpenAiCompatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = serde_json::json!({
            "model": request.params.model,
            "messages": request.messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        });
        let start = Instant::now();
        let mut req = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", text.chars().take(500).collect::<String>())));
        }
        let wire: WireResponse = resp
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?;
        let usage = match wire.usage {
            Some(WireUsage { prompt_tokens: Some(i), completion_tokens: Some(o) }) => Usage {
                input_tokens: i,
                output_tokens: o,
                estimated: false,
            },
            _ => Usage::estimate(request, &content),
        };
        Ok(ChatResponse {
            content,
            usage,
            latency_ms: Some(start.elapsed().as_millis() as u64),
        })
    }

    fn describe(&self) -> String {
        format!("openai-compatible:{}", self.base_url)
    }
}

// ---------------------------------------------------------------------------
// Cassettes

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub response: ChatResponse,
    /// Informational; not part of the lookup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_role: Option<AgentRole>,
}

/// Serves responses from a cassette. Repeated requests with the same key
/// consume entries in file order; the last one is then reused.
pub struct ReplayBackend {
    source: String,
    entries: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl ReplayBackend {
    pub fn from_entries(source: impl Into<String>, entries: Vec<CassetteEntry>) -> Self {
        let mut map: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for e in entries {
            map.entry(e.key).or_default().push_back(e.response);
        }
        Self {
            source: source.into(),
            entries: Mutex::new(map),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::Config(format!("cannot open cassette {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                GatewayError::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(path.display().to_string(), entries))
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = request.cassette_key();
        let mut map = self.entries.lock().expect("cassette lock");
        let queue = map.get_mut(&key).ok_or_else(|| BackendError::ReplayMiss(key.clone()))?;
        let response = if queue.len() > 1 {
            queue.pop_front().expect("non-empty")
        } else {
            queue.front().cloned().ok_or(BackendError::ReplayMiss(key))?
        };
        Ok(response)
    }

    fn describe(&self) -> String {
        format!("replay:{}", self.source)
    }
}

/// Forwards to an inner backend and appends each exchange to a cassette.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    path: PathBuf,
    sink: Mutex<File>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn ChatBackend>, path: &Path) -> Result<Self, GatewayError> {
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Config(format!("cannot open cassette {}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            sink: Mutex::new(sink),
        })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let entry = CassetteEntry {
            key: request.cassette_key(),
            response: response.clone(),
            agent_role: Some(request.agent_role),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| BackendError::Fatal(e.to_string()))?;
        line.push('\n');
        self.sink
            .lock()
            .expect("cassette lock")
            .write_all(line.as_bytes())
            .map_err(|e| BackendError::Fatal(format!("cannot write cassette: {e}")))?;
        Ok(response)
    }

    fn describe(&self) -> String {
        format!("record:{}->{}", self.inner.describe(), self.path.display())
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone)]
struct ScriptRule {
    role: Option<AgentRole>,
    needles: Vec<String>,
    replies: VecDeque<String>,
}

/// Rule-driven fake model. The first rule whose role matches and whose
/// needles all occur in the final message answers; its replies are consumed in
/// order and the last one is reused.
#[derive(Default)]
pub struct ScriptedBackend {
    rules: Mutex<Vec<ScriptRule>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(self, role: AgentRole, replies: &[&str]) -> Self {
        self.rule(Some(role), Vec::new(), replies)
    }

    pub fn on_containing(self, role: AgentRole, needle: &str, replies: &[&str]) -> Self {
        self.rule(Some(role), vec![needle.to_string()], replies)
    }

    pub fn on_all(self, role: AgentRole, needles: &[&str], replies: &[&str]) -> Self {
        self.rule(Some(role), needles.iter().map(|n| n.to_string()).collect(), replies)
    }

    fn rule(self, role: Option<AgentRole>, needles: Vec<String>, replies: &[&str]) -> Self {
        assert!(!replies.is_empty(), "a script rule needs at least one reply");
        self.rules.lock().expect("rules lock").push(ScriptRule {
            role,
            needles,
            replies: replies.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("seen lock").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.seen.lock().expect("seen lock").push(request.clone());
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let mut rules = self.rules.lock().expect("rules lock");
        let rule = rules
            .iter_mut()
            .find(|r| {
                r.role.is_none_or(|role| role == request.agent_role)
                    && r.needles.iter().all(|n| last.contains(n.as_str()))
            })
            .ok_or_else(|| BackendError::Fatal(format!("no scripted reply for {}", request.agent_role)))?;
        let content = if rule.replies.len() > 1 {
            rule.replies.pop_front().expect("non-empty")
        } else {
            rule.replies.front().cloned().expect("non-empty")
        };
        Ok(ChatResponse {
            usage: Usage::estimate(request, &content),
            content,
            latency_ms: Some(0),
        })
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

// ---------------------------------------------------------------------------
// Ledger

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u64,
    #[serde(default)]
    pub estimated_calls: u64,
}

impl RoleUsage {
    pub fn tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    fn add(&mut self, other: &RoleUsage) {
        self.calls += other.calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_ms += other.wall_ms;
        self.estimated_calls += other.estimated_calls;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub agent_role: AgentRole,
    pub key: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u64,
    pub estimated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub roles: BTreeMap<AgentRole, RoleUsage>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub agent_role: AgentRole,
    pub usage: RoleUsage,
    pub token_pct: f64,
    pub wall_pct: f64,
}

impl UsageLedger {
    pub fn record(&mut self, call: CallRecord) {
        let entry = self.roles.entry(call.agent_role).or_default();
        entry.add(&RoleUsage {
            calls: 1,
            input_tokens: call.input_tokens,
            output_tokens: call.output_tokens,
            wall_ms: call.wall_ms,
            estimated_calls: u64::from(call.estimated),
        });
        self.calls.push(call);
    }

    pub fn role(&self, role: AgentRole) -> RoleUsage {
        self.roles.get(&role).copied().unwrap_or_default()
    }

    pub fn totals(&self) -> RoleUsage {
        let mut t = RoleUsage::default();
        for u in self.roles.values() {
            t.add(u);
        }
        t
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for (role, u) in &other.roles {
            self.roles.entry(*role).or_default().add(u);
        }
        self.calls.extend(other.calls.iter().cloned());
    }

    /// One row per agent role with its share of tokens and wall time, in
    /// percent. Shares are zero when nothing was recorded.
    pub fn rows(&self) -> Vec<LedgerRow> {
        let totals = self.totals();
        let pct = |x: u64, total: u64| if total == 0 { 0.0 } else { 100.0 * x as f64 / total as f64 };
        AgentRole::ALL
            .into_iter()
            .map(|role| {
                let usage = self.role(role);
                LedgerRow {
                    agent_role: role,
                    usage,
                    token_pct: pct(usage.tokens(), totals.tokens()),
                    wall_pct: pct(usage.wall_ms, totals.wall_ms),
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Clone)]
pub struct Route {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

/// Routes each agent role to a backend and model and keeps a usage ledger.
/// Clones share the ledger; [`LlmGateway::fork`] starts a fresh one.
#[derive(Clone)]
pub struct LlmGateway {
    default_route: Route,
    routes: HashMap<AgentRole, Route>,
    temperature: f64,
    max_output_tokens: u32,
    retry: RetryPolicy,
    ledger: Arc<Mutex<UsageLedger>>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, model: impl Into<String>) -> Self {
        Self {
            default_route: Route { backend, model: model.into() },
            routes: HashMap::new(),
            temperature: 1.0,
            max_output_tokens: 4096,
            retry: RetryPolicy::default(),
            ledger: Arc::new(Mutex::new(UsageLedger::default())),
        }
    }

    pub fn with_route(mut self, role: AgentRole, backend: Arc<dyn ChatBackend>, model: impl Into<String>) -> Self {
        self.routes.insert(role, Route { backend, model: model.into() });
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn route(&self, role: AgentRole) -> &Route {
        self.routes.get(&role).unwrap_or(&self.default_route)
    }

    /// Backend description per role, for run-records.
    pub fn describe(&self) -> BTreeMap<AgentRole, String> {
        AgentRole::ALL
            .into_iter()
            .map(|r| {
                let route = self.route(r);
                (r, format!("{} [{}]", route.backend.describe(), route.model))
            })
            .collect()
    }

    /// Same routing with an empty ledger.
    pub fn fork(&self) -> Self {
        let mut g = self.clone();
        g.ledger = Arc::new(Mutex::new(UsageLedger::default()));
        g
    }

    pub fn request(&self, role: AgentRole, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            agent_role: role,
            messages,
            params: ChatParams {
                model: self.route(role).model.clone(),
                temperature: self.temperature,
                max_output_tokens: self.max_output_tokens,
            },
        }
    }

    pub fn chat(&self, role: AgentRole, messages: Vec<ChatMessage>) -> Result<ChatResponse, GatewayError> {
        let request = self.request(role, messages);
        self.send(&request)
    }

    pub fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let backend = &self.route(request.agent_role).backend;
        let start = Instant::now();
        let mut attempt = 0u32;
        let response = loop {
            attempt += 1;
            match backend.complete(request) {
                Ok(r) => break r,
                Err(BackendError::Transient(message)) => {
                    if attempt > self.retry.max_retries {
                        return Err(GatewayError::Unreachable { attempts: attempt, message });
                    }
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::warn!("{} call failed ({message}); retry {attempt} in {delay} ms", request.agent_role);
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(BackendError::Fatal(m)) => return Err(GatewayError::Backend(m)),
                Err(BackendError::ReplayMiss(key)) => return Err(GatewayError::ReplayMiss { key }),
            }
        };
        let wall_ms = response
            .latency_ms
            .unwrap_or_else(|| start.elapsed().as_millis() as u64);
        self.ledger.lock().expect("ledger lock").record(CallRecord {
            agent_role: request.agent_role,
            key: request.cassette_key(),
            input_tokens: response.usage.input_tokens,
            output_tokens: response.usage.output_tokens,
            wall_ms,
            estimated: response.usage.estimated,
        });
        Ok(response)
    }

    pub fn ledger_report(&self) -> UsageLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    /// Folds a forked gateway's ledger into this one.
    pub fn absorb(&self, other: &UsageLedger) {
        self.ledger.lock().expect("ledger lock").merge(other);
    }
}
