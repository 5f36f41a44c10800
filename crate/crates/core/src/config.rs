//! Run configuration: one TOML or JSON file. Secrets come from the
//! environment only and never enter the config snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentSuite, PromptTemplates};
use crate::exec::{ExecLimits, DEFAULT_ROW_CAP, DEFAULT_TIMEOUT_MS};
use crate::llm::{AgentRole, BackendError, ChatBackend, ChatRequest, ChatResponse, LlmGateway, OpenAiCompatBackend, RetryPolicy};
use crate::pipeline::PipelineConfig;
use crate::sql::SqlDialect;
use crate::values::{EmbeddingProvider, HttpEmbeddingProvider, NgramEmbedding, RetrieveOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// An OpenAI-compatible chat endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_request_timeout")]
    pub timeout_secs: u64,
}

fn default_request_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRoute {
    /// Name of an entry in `endpoints`.
    pub backend: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingConfig {
    /// Character n-gram cosine; no network.
    #[default]
    Ngram,
    Http {
        backend: String,
        model: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of `<db_id>.sqlite`, `<db_id>.db` or `<db_id>/<db_id>.sqlite`.
    #[serde(default)]
    pub databases: Option<PathBuf>,
    /// Directory of `<db_id>.json` schema manifests, used instead of
    /// introspection when present.
    #[serde(default)]
    pub schema_manifests: Option<PathBuf>,
    /// Benchmark items, JSON lines.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub artifacts: Option<PathBuf>,
    #[serde(default)]
    pub runs: Option<PathBuf>,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    /// Prompt template directory; built-in templates otherwise.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dialect: SqlDialect,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_tau")]
    pub tau_edit: f64,
    #[serde(default = "default_tau")]
    pub tau_semantic: f64,
    #[serde(default = "default_retrieval_limit")]
    pub retrieval_limit: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Chunk token budget.
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    /// Prompt context limit of the routed models.
    #[serde(default)]
    pub context_limit: Option<usize>,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_question_parallelism")]
    pub question_parallelism: usize,
    #[serde(default)]
    pub sequential: bool,
    #[serde(default = "default_k")]
    pub k_candidates: usize,
    #[serde(default = "default_row_cap")]
    pub row_cap: usize,
    #[serde(default = "default_exec_timeout")]
    pub exec_timeout_ms: u64,
    /// Skip schema compression.
    #[serde(default)]
    pub no_compress: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(default)]
    pub default_route: Option<ModelRoute>,
    #[serde(default)]
    pub routes: BTreeMap<AgentRole, ModelRoute>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.5
}
fn default_retrieval_limit() -> usize {
    RetrieveOptions::default().limit
}
fn default_t_max() -> usize {
    5
}
fn default_budget() -> usize {
    10_000
}
fn default_max_output() -> u32 {
    4096
}
fn default_parallelism() -> usize {
    4
}
fn default_question_parallelism() -> usize {
    1
}
fn default_k() -> usize {
    1
}
fn default_row_cap() -> usize {
    DEFAULT_ROW_CAP
}
fn default_exec_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// The model used for roles without a route when nothing is configured.
pub const FALLBACK_MODEL: &str = "default";

impl RunConfig {
    /// Loads `.json` as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        };
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let config: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [("tau_edit", self.tau_edit), ("tau_semantic", self.tau_semantic)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid(format!("temperature must lie in [0, 2], got {}", self.temperature));
        }
        if self.t_max < 1 {
            return invalid("t_max must be at least 1".into());
        }
        if self.token_budget == 0 {
            return invalid("token_budget must be positive".into());
        }
        for (name, v) in [
            ("parallelism", self.parallelism),
            ("question_parallelism", self.question_parallelism),
            ("k_candidates", self.k_candidates),
            ("row_cap", self.row_cap),
            ("retrieval_limit", self.retrieval_limit),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        let routes = self.default_route.iter().chain(self.routes.values());
        for r in routes {
            if !self.endpoints.contains_key(&r.backend) {
                return invalid(format!("route for model {} names unknown backend {}", r.model, r.backend));
            }
        }
        if let EmbeddingConfig::Http { backend, .. } = &self.embedding {
            if !self.endpoints.contains_key(backend) {
                return invalid(format!("embedding names unknown backend {backend}"));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            t_max: self.t_max,
            retrieve: RetrieveOptions {
                tau_edit: self.tau_edit,
                tau_semantic: self.tau_semantic,
                limit: self.retrieval_limit,
            },
            exec_limits: ExecLimits {
                row_cap: self.row_cap,
                timeout_ms: self.exec_timeout_ms,
            },
            parallelism: self.parallelism,
            sequential: self.sequential,
            k_candidates: self.k_candidates,
        }
    }

    /// Canonical JSON of the effective configuration.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().to_string().as_bytes()))
    }

    /// Model name per role, as used in requests and cassette keys.
    pub fn model_for(&self, role: AgentRole) -> String {
        self.routes
            .get(&role)
            .or(self.default_route.as_ref())
            .map_or_else(|| FALLBACK_MODEL.to_string(), |r| r.model.clone())
    }

    fn endpoint_backend(&self, name: &str) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let e = self
            .endpoints
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown backend {name}")))?;
        let key = e.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        Ok(Arc::new(OpenAiCompatBackend::new(&e.base_url, key, Duration::from_secs(e.timeout_secs))))
    }

    /// One backend dispatching each role to its configured endpoint.
    pub fn live_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let Some(default) = &self.default_route else {
            return Err(ConfigError::Invalid(
                "no default_route configured; live calls need an endpoint (or use --replay)".into(),
            ));
        };
        let mut routes = BTreeMap::new();
        for role in AgentRole::ALL {
            let route = self.routes.get(&role).unwrap_or(default);
            routes.insert(role, self.endpoint_backend(&route.backend)?);
        }
        Ok(Arc::new(RoutedBackend { routes }))
    }

    /// A gateway sending every role to `backend` under the configured model
    /// names, so cassette keys match the recording.
    pub fn gateway_over(&self, backend: Arc<dyn ChatBackend>) -> LlmGateway {
        let mut gateway = LlmGateway::new(backend.clone(), self.model_for(AgentRole::Rewriter));
        for role in AgentRole::ALL {
            gateway = gateway.with_route(role, backend.clone(), self.model_for(role));
        }
        self.tune(gateway)
    }

    fn tune(&self, gateway: LlmGateway) -> LlmGateway {
        gateway
            .with_temperature(self.temperature)
            .with_max_output_tokens(self.max_output_tokens)
            .with_retry(self.retry)
    }

    pub fn templates(&self) -> Result<PromptTemplates, ConfigError> {
        match &self.paths.templates {
            Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(PromptTemplates::builtin()),
        }
    }

    pub fn suite(&self, gateway: LlmGateway) -> Result<AgentSuite, ConfigError> {
        let mut suite = AgentSuite::new(gateway, self.templates()?, self.dialect);
        suite.context_limit = self.context_limit;
        Ok(suite)
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
        match &self.embedding {
            EmbeddingConfig::Ngram => Ok(Box::new(NgramEmbedding)),
            EmbeddingConfig::Http { backend, model } => {
                let e = self
                    .endpoints
                    .get(backend)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown backend {backend}")))?;
                let key = e.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
                Ok(Box::new(HttpEmbeddingProvider::new(&e.base_url, model, key)))
            }
        }
    }

    pub fn describe_embedding(&self) -> String {
        match &self.embedding {
            EmbeddingConfig::Ngram => "ngram-cosine".into(),
            EmbeddingConfig::Http { backend, model } => format!("http:{backend} [{model}]"),
        }
    }
}

/// Sends each request to the backend of its agent role.
pub struct RoutedBackend {
    routes: BTreeMap<AgentRole, Arc<dyn ChatBackend>>,
}

impl ChatBackend for RoutedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        match self.routes.get(&request.agent_role) {
            Some(b) => b.complete(request),
            None => Err(BackendError::Fatal(format!("no route for {}", request.agent_role))),
        }
    }

    fn describe(&self) -> String {
        let mut seen: Vec<String> = self.routes.values().map(|b| b.describe()).collect();
        seen.sort();
        seen.dedup();
        seen.join(", ")
    }
}
