//! Batch runs over benchmark items: artifact preparation, backend wiring
//! and run-record persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::artifacts::{locate_database, prepare, BuiltFlags, DatabaseArtifacts, PreprocessSettings};
use crate::config::{ConfigError, RunConfig};
use crate::eval::BenchmarkItem;
use crate::exec::{ExecutionBackend, SqliteBackend};
use crate::llm::{AgentRole, ChatBackend, LlmGateway, RecordingBackend, ReplayBackend, UsageLedger};
use crate::pipeline::{run_pipeline, FilteredSchema, PipelineRun, RunInputs, RunStatus, Stage};
use crate::values::LshParams;

pub const DEFAULT_ARTIFACT_DIR: &str = "artifacts";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Cassette(String),
    #[error("cannot write run-record {path}: {message}")]
    Persist { path: String, message: String },
    #[error("cannot read run-records from {path}: {message}")]
    Load { path: String, message: String },
}

/// Where model replies come from.
#[derive(Clone)]
pub enum ChatSource {
    /// The configured HTTP endpoints.
    Live,
    /// A cassette; misses are errors.
    Replay(PathBuf),
    /// The configured endpoints, appending every exchange to a cassette.
    Record(PathBuf),
    /// Any backend, for tests and embedding.
    Backend(Arc<dyn ChatBackend>),
}

impl ChatSource {
    fn backend(&self, config: &RunConfig) -> Result<Arc<dyn ChatBackend>, RunnerError> {
        Ok(match self {
            ChatSource::Live => config.live_backend()?,
            ChatSource::Replay(path) => {
                Arc::new(ReplayBackend::load(path).map_err(|e| RunnerError::Cassette(e.to_string()))?)
            }
            ChatSource::Record(path) => {
                let inner = config.live_backend()?;
                Arc::new(RecordingBackend::create(inner, path).map_err(|e| RunnerError::Cassette(e.to_string()))?)
            }
            ChatSource::Backend(b) => b.clone(),
        })
    }

    /// Replay runs freeze execution timing so records are reproducible.
    fn deterministic(&self) -> bool {
        matches!(self, ChatSource::Replay(_) | ChatSource::Backend(_))
    }

    fn describe(&self) -> String {
        match self {
            ChatSource::Live => "live".into(),
            ChatSource::Replay(p) => format!("replay:{}", cassette_digest(p)),
            ChatSource::Record(p) => format!("record:{}", p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())),
            ChatSource::Backend(b) => format!("backend:{}", b.describe()),
        }
    }
}

fn cassette_digest(path: &Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => hex::encode(Sha256::digest(&bytes))[..16].to_string(),
        Err(_) => "unreadable".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub name: String,
    pub fingerprint: String,
}

/// A run plus everything needed to audit how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: PipelineRun,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub chat_source: String,
    pub agent_backends: BTreeMap<AgentRole, String>,
    pub execution_backend: String,
    pub embedding: String,
    pub templates: TemplateInfo,
    pub artifacts_built: BuiltFlags,
}

impl RunRecord {
    pub fn file_name(question_id: &str) -> String {
        let safe: String = question_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        format!("{safe}.json")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run-record serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, RunnerError> {
        let path = dir.join(Self::file_name(&self.run.question_id));
        let persist = |message: String| RunnerError::Persist {
            path: path.display().to_string(),
            message,
        };
        std::fs::create_dir_all(dir).map_err(|e| persist(e.to_string()))?;
        std::fs::write(&path, self.to_json()).map_err(|e| persist(e.to_string()))?;
        Ok(path)
    }
}

/// Reads every `*.json` run-record in `dir`, sorted by question id.
pub fn load_run_records(dir: &Path) -> Result<Vec<RunRecord>, RunnerError> {
    let load = |message: String| RunnerError::Load {
        path: dir.display().to_string(),
        message,
    };
    let mut records = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| load(e.to_string()))? {
        let path = entry.map_err(|e| load(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| load(format!("{}: {e}", path.display())))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| load(format!("{}: {e}", path.display())))?;
        records.push(record);
    }
    records.sort_by(|a, b| a.run.question_id.cmp(&b.run.question_id));
    Ok(records)
}

pub fn preprocess_settings(config: &RunConfig) -> PreprocessSettings {
    PreprocessSettings {
        token_budget: config.token_budget,
        compress: !config.no_compress,
        lsh: LshParams::default(),
    }
}

pub fn artifact_dir(config: &RunConfig) -> PathBuf {
    config.paths.artifacts.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACT_DIR))
}

/// Locates the database and schema manifest for `db_id` and prepares its
/// artifacts.
pub fn prepare_database(config: &RunConfig, db_id: &str) -> Result<DatabaseArtifacts, String> {
    let dir = config
        .paths
        .databases
        .as_deref()
        .ok_or("no database directory configured (paths.databases)")?;
    let db_path = locate_database(dir, db_id).ok_or_else(|| format!("no database file for {db_id} under {}", dir.display()))?;
    let manifest = config
        .paths
        .schema_manifests
        .as_ref()
        .map(|d| d.join(format!("{db_id}.json")))
        .filter(|p| p.is_file());
    prepare(db_id, &db_path, manifest.as_deref(), &artifact_dir(config), &preprocess_settings(config)).map_err(|e| e.to_string())
}

fn failed_run(item: &BenchmarkItem, stage: Stage, error: String) -> PipelineRun {
    PipelineRun {
        question_id: item.question_id.clone(),
        db_id: item.db_id.clone(),
        status: RunStatus::Failed,
        failed_stage: Some(stage),
        error: Some(error),
        rewritten: None,
        chunk_outcomes: Vec::new(),
        aggregated_views: Vec::new(),
        filtered_schema: FilteredSchema::default(),
        plan: None,
        sql_iterations: Vec::new(),
        candidates: Vec::new(),
        final_sql: None,
        final_result: None,
        ledger: UsageLedger::default(),
    }
}

/// Runs every item and returns records in item order. Records are written
/// to `paths.runs` when configured, failures included.
pub fn run_items(config: &RunConfig, items: &[BenchmarkItem], source: &ChatSource) -> Result<Vec<RunRecord>, RunnerError> {
    config.validate()?;
    let backend = source.backend(config)?;
    let gateway: LlmGateway = config.gateway_over(backend);
    let suite = config.suite(gateway)?;
    let embedder = config.embedder()?;
    let pipeline_config = config.pipeline();
    let deterministic = source.deterministic();

    let mut databases: BTreeMap<String, Result<(DatabaseArtifacts, SqliteBackend), String>> = BTreeMap::new();
    for item in items {
        if !databases.contains_key(&item.db_id) {
            let prepared = prepare_database(config, &item.db_id).map(|a| {
                let mut backend = SqliteBackend::new(&a.db_path);
                if deterministic {
                    backend = backend.with_frozen_clock();
                }
                (a, backend)
            });
            if let Err(e) = &prepared {
                log::error!("{}: {e}", item.db_id);
            }
            databases.insert(item.db_id.clone(), prepared);
        }
    }

    let chat_source = source.describe();
    let agent_backends = suite.gateway.describe();
    let templates = TemplateInfo {
        name: suite.templates.name().to_string(),
        fingerprint: suite.templates.fingerprint(),
    };
    let snapshot = config.snapshot();
    let config_hash = config.hash();

    let run_one = |item: &BenchmarkItem| -> RunRecord {
        let (run, execution_backend, built) = match &databases[&item.db_id] {
            Err(e) => (failed_run(item, Stage::Preprocess, e.clone()), String::new(), BuiltFlags::default()),
            Ok((artifacts, exec)) => {
                let local = crate::agents::AgentSuite {
                    gateway: suite.gateway.fork(),
                    ..suite.clone()
                };
                let inputs = RunInputs {
                    question_id: &item.question_id,
                    question: &item.question,
                    knowledge: item.evidence.as_deref().unwrap_or(""),
                    schema: &artifacts.compressed,
                    partition: &artifacts.partition,
                    index: Some(&artifacts.index),
                };
                let run = run_pipeline(&local, exec, embedder.as_ref(), &pipeline_config, &inputs);
                (run, exec.describe(), artifacts.built)
            }
        };
        RunRecord {
            run,
            config: snapshot.clone(),
            config_hash: config_hash.clone(),
            chat_source: chat_source.clone(),
            agent_backends: agent_backends.clone(),
            execution_backend,
            embedding: config.describe_embedding(),
            templates: templates.clone(),
            artifacts_built: built,
        }
    };

    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; items.len()]);
    let next = AtomicUsize::new(0);
    let workers = config.question_parallelism.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let record = run_one(&items[i]);
                slots.lock().expect("slots lock")[i] = Some(record);
            });
        }
    });
    let records: Vec<RunRecord> = slots
        .into_inner()
        .expect("slots lock")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect();
    if let Some(dir) = &config.paths.runs {
        for r in &records {
            r.save(dir)?;
        }
    }
    Ok(records)
}
