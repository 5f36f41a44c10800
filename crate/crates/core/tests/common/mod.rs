//! Shared toy-shop setup for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use viewsql_core::config::{PathsConfig, RunConfig};
use viewsql_core::llm::{ChatBackend, RecordingBackend};
use viewsql_core::runner::{run_items, ChatSource};
use viewsql_core::toy;

pub struct ToyWorkspace {
    pub dir: tempfile::TempDir,
    pub config: RunConfig,
    pub cassette: PathBuf,
}

impl ToyWorkspace {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}

/// Creates the toy database, a config pointing at it, and a cassette
/// recorded from the scripted model.
pub fn toy_workspace() -> ToyWorkspace {
    let dir = tempfile::tempdir().unwrap();
    let dbs = dir.path().join("databases");
    std::fs::create_dir_all(&dbs).unwrap();
    toy::create_database(&dbs.join(format!("{}.sqlite", toy::DB_ID))).unwrap();
    let config = RunConfig {
        token_budget: toy::TOKEN_BUDGET,
        paths: PathsConfig {
            databases: Some(dbs),
            artifacts: Some(dir.path().join("artifacts")),
            ..PathsConfig::default()
        },
        ..RunConfig::default()
    };
    let cassette = dir.path().join("cassette.jsonl");
    let scripted: Arc<dyn ChatBackend> = Arc::new(toy::scripted_backend());
    let recorder: Arc<dyn ChatBackend> = Arc::new(RecordingBackend::create(scripted, &cassette).unwrap());
    run_items(&config, &toy::items(), &ChatSource::Backend(recorder)).unwrap();
    ToyWorkspace { dir, config, cassette }
}
