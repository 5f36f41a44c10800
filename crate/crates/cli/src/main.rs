//! `viewsql`: preprocessing, pipeline runs and evaluation from one config.
//!
//! Exit codes: 0 success, 1 partial failure, 2 configuration error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use viewsql_core::artifacts::{list_databases, locate_database};
use viewsql_core::catalog::{estimate_tokens, ingest_from_database, DetailLevel, SchemaCatalog};
use viewsql_core::compress::{compress_schema, CompressedCatalog};
use viewsql_core::config::RunConfig;
use viewsql_core::eval::{evaluate, load_manifest, BenchmarkItem, EvalDatabase, EvalOptions, EvalReport, MatchMode};
use viewsql_core::exec::SqliteBackend;
use viewsql_core::llm::RecordingBackend;
use viewsql_core::pipeline::RunStatus;
use viewsql_core::runner::{load_run_records, prepare_database, run_items, ChatSource, RunnerError};
use viewsql_core::split::split_schema;
use viewsql_core::sql::SqlDialect;
use viewsql_core::toy;

#[derive(Parser)]
#[command(name = "viewsql", version, about = "Agentic text-to-SQL over chunked schemas with validated CTE views")]
struct Cli {
    /// TOML or JSON run configuration. Relative paths inside it resolve
    /// against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Repeat for more log output.
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    dialect: Option<SqlDialect>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    tau_edit: Option<f64>,
    #[arg(long, global = true)]
    tau_semantic: Option<f64>,
    #[arg(long, global = true)]
    t_max: Option<usize>,
    #[arg(long, global = true)]
    token_budget: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    question_parallelism: Option<usize>,
    #[arg(long, global = true)]
    k_candidates: Option<usize>,
    #[arg(long, global = true)]
    row_cap: Option<usize>,
    /// Process chunks one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(long, global = true)]
    no_compress: bool,
    #[arg(long, global = true)]
    databases: Option<PathBuf>,
    #[arg(long, global = true)]
    schema_manifests: Option<PathBuf>,
    /// Benchmark items, JSON lines.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    #[arg(long, global = true)]
    runs: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build compressed catalogs, partitions and value indexes.
    Preprocess {
        /// Databases to prepare; all under the database directory by default.
        #[arg(long = "db")]
        dbs: Vec<String>,
    },
    /// Show how a database schema compresses.
    Compress {
        #[arg(long)]
        db: String,
        /// Print the compressed catalog as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Show the chunk partition of a database schema.
    Split {
        #[arg(long)]
        db: String,
        #[arg(long)]
        json: bool,
    },
    /// Build or query value indexes.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Run the pipeline over manifest items.
    Run {
        /// Answer model calls from a cassette.
        #[arg(long, conflicts_with = "record")]
        replay: Option<PathBuf>,
        /// Call the configured endpoints and append every exchange to a cassette.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Only these question ids.
        #[arg(long = "question")]
        questions: Vec<String>,
        /// Only questions on these databases.
        #[arg(long = "db")]
        dbs: Vec<String>,
        /// At most this many questions.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score run-records against the manifest.
    Eval {
        #[arg(long, default_value = "strict")]
        mode: MatchMode,
        /// Candidates considered for recall EX.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved evaluation report.
    Report {
        input: PathBuf,
        /// Also list every question.
        #[arg(long)]
        per_question: bool,
    },
    /// Write a toy database, manifest, config and cassette to a directory.
    Demo {
        #[arg(long, default_value = "viewsql-demo")]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    Build {
        #[arg(long = "db")]
        dbs: Vec<String>,
    },
    Lookup {
        #[arg(long)]
        db: String,
        value: String,
    },
}

enum Failure {
    Config(String),
    Partial(String),
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Config(e) => Failure::Config(e.to_string()),
            other => Failure::Partial(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = load_config(cli.config.as_deref(), &cli.overrides).and_then(|config| dispatch(cli.command, config));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
    }
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig, Failure> {
    let mut config = match path {
        Some(p) => {
            let mut c = RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?;
            let base = p.parent().unwrap_or(Path::new("."));
            let paths = &mut c.paths;
            for slot in [
                &mut paths.databases,
                &mut paths.schema_manifests,
                &mut paths.manifest,
                &mut paths.artifacts,
                &mut paths.runs,
                &mut paths.cassette,
                &mut paths.templates,
            ] {
                resolve(base, slot);
            }
            c
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = o.$field.clone() { config.$field = v; })*
        };
    }
    set!(dialect, temperature, tau_edit, tau_semantic, t_max, token_budget, parallelism, question_parallelism, k_candidates, row_cap);
    config.sequential |= o.sequential;
    config.no_compress |= o.no_compress;
    macro_rules! set_path {
        ($($field:ident),*) => {
            $(if let Some(v) = o.$field.clone() { config.paths.$field = Some(v); })*
        };
    }
    set_path!(databases, schema_manifests, manifest, artifacts, runs);
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

fn dispatch(command: Command, config: RunConfig) -> CmdResult {
    match command {
        Command::Preprocess { dbs } => preprocess(&config, dbs),
        Command::Compress { db, json } => compress(&config, &db, json),
        Command::Split { db, json } => split(&config, &db, json),
        Command::Index { action: IndexAction::Build { dbs } } => preprocess(&config, dbs),
        Command::Index { action: IndexAction::Lookup { db, value } } => lookup(&config, &db, &value),
        Command::Run { replay, record, questions, dbs, limit } => {
            let source = match (replay, record) {
                (Some(p), _) => ChatSource::Replay(p),
                (None, Some(p)) => ChatSource::Record(p),
                (None, None) => ChatSource::Live,
            };
            run(config, source, &questions, &dbs, limit)
        }
        Command::Eval { mode, k, out } => eval(&config, mode, k, out.as_deref()),
        Command::Report { input, per_question } => report(&input, per_question),
        Command::Demo { dir } => demo(&dir),
    }
}

fn database_dir(config: &RunConfig) -> Result<&Path, Failure> {
    config
        .paths
        .databases
        .as_deref()
        .ok_or_else(|| Failure::Config("no database directory configured (paths.databases or --databases)".into()))
}

fn preprocess(config: &RunConfig, dbs: Vec<String>) -> CmdResult {
    let ids = if dbs.is_empty() {
        let dir = database_dir(config)?;
        list_databases(dir).map_err(|e| Failure::Config(e.to_string()))?
    } else {
        dbs
    };
    if ids.is_empty() {
        log::warn!("no databases found");
    }
    let mut failed = Vec::new();
    for id in &ids {
        match prepare_database(config, id) {
            Ok(a) => {
                let built: Vec<&str> = [
                    (a.built.compressed, "catalog"),
                    (a.built.partition, "partition"),
                    (a.built.value_index, "values"),
                ]
                .into_iter()
                .filter_map(|(b, n)| b.then_some(n))
                .collect();
                let state = if built.is_empty() { "up-to-date".to_string() } else { format!("built {}", built.join(", ")) };
                println!(
                    "{:<24} {:<32} tables {:>4}  chunks {:>3}  values {:>7}",
                    id,
                    state,
                    a.compressed.catalog.tables.len(),
                    a.partition.chunks.len(),
                    a.index.len()
                );
            }
            Err(e) => {
                println!("{id:<24} FAILED: {e}");
                failed.push(id.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(format!("{} of {} databases failed: {}", failed.len(), ids.len(), failed.join(", "))))
    }
}

fn load_catalog(config: &RunConfig, db_id: &str) -> Result<SchemaCatalog, Failure> {
    let manifest = config
        .paths
        .schema_manifests
        .as_ref()
        .map(|d| d.join(format!("{db_id}.json")))
        .filter(|p| p.is_file());
    let result = match manifest {
        Some(p) => SchemaCatalog::from_manifest_path(&p),
        None => {
            let dir = database_dir(config)?;
            let path = locate_database(dir, db_id)
                .ok_or_else(|| Failure::Partial(format!("no database file for {db_id} under {}", dir.display())))?;
            ingest_from_database(&path)
        }
    };
    result.map_err(|e| Failure::Partial(e.to_string()))
}

fn compressed(config: &RunConfig, catalog: &SchemaCatalog) -> CompressedCatalog {
    if config.no_compress {
        CompressedCatalog::identity(catalog.clone())
    } else {
        compress_schema(catalog)
    }
}

fn compress(config: &RunConfig, db: &str, json: bool) -> CmdResult {
    let catalog = load_catalog(config, db)?;
    let c = compress_schema(&catalog);
    if json {
        println!("{}", serde_json::to_string_pretty(&c).expect("serializable"));
        return Ok(());
    }
    let before = estimate_tokens(&catalog.serialize(DetailLevel::Full));
    let after = estimate_tokens(&c.catalog.serialize(DetailLevel::Full));
    println!("{:<16}{:>12}{:>12}", "", "original", "compressed");
    println!("{:<16}{:>12}{:>12}", "tables", catalog.tables.len(), c.catalog.tables.len());
    println!("{:<16}{:>12}{:>12}", "columns", catalog.column_count(), c.catalog.column_count());
    println!("{:<16}{:>12}{:>12}", "tokens (est.)", before, after);
    for cluster in c.table_clusters.iter().chain(&c.column_clusters) {
        println!("cluster {} ({} members)", cluster.pattern, cluster.members.len());
    }
    Ok(())
}

fn split(config: &RunConfig, db: &str, json: bool) -> CmdResult {
    let catalog = load_catalog(config, db)?;
    let partition = split_schema(&compressed(config, &catalog).catalog, config.token_budget);
    if json {
        println!("{}", serde_json::to_string_pretty(&partition).expect("serializable"));
        return Ok(());
    }
    println!("budget {}", partition.budget);
    println!("{:<6}{:>8}{:>10}  tables", "chunk", "tokens", "oversize");
    for c in &partition.chunks {
        println!("{:<6}{:>8}{:>10}  {}", c.index, c.token_estimate, if c.oversize { "yes" } else { "" }, c.table_names().join(", "));
    }
    Ok(())
}

fn lookup(config: &RunConfig, db: &str, value: &str) -> CmdResult {
    let artifacts = prepare_database(config, db).map_err(Failure::Partial)?;
    let embedder = config.embedder().map_err(|e| Failure::Config(e.to_string()))?;
    let found = artifacts
        .index
        .retrieve(value, &config.pipeline().retrieve, embedder.as_ref())
        .map_err(|e| Failure::Partial(e.to_string()))?;
    if found.is_empty() {
        println!("no values above the thresholds");
    }
    println!("{:<32}{:<32}{:>8}{:>10}", "value", "column", "edit", "semantic");
    for c in found {
        println!(
            "{:<32}{:<32}{:>8.3}{:>10.3}",
            c.entry.value,
            format!("{}.{}", c.entry.table, c.entry.column),
            c.edit_similarity,
            c.semantic_similarity
        );
    }
    Ok(())
}

fn manifest_items(config: &RunConfig) -> Result<Vec<BenchmarkItem>, Failure> {
    let path = config
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| Failure::Config("no benchmark manifest configured (paths.manifest or --manifest)".into()))?;
    load_manifest(path, config.dialect).map_err(|e| Failure::Config(e.to_string()))
}

fn run(mut config: RunConfig, source: ChatSource, questions: &[String], dbs: &[String], limit: Option<usize>) -> CmdResult {
    if config.paths.runs.is_none() {
        config.paths.runs = Some(PathBuf::from("runs"));
    }
    let wanted_q: BTreeSet<&str> = questions.iter().map(String::as_str).collect();
    let wanted_db: BTreeSet<&str> = dbs.iter().map(String::as_str).collect();
    let mut items: Vec<BenchmarkItem> = manifest_items(&config)?
        .into_iter()
        .filter(|i| wanted_q.is_empty() || wanted_q.contains(i.question_id.as_str()))
        .filter(|i| wanted_db.is_empty() || wanted_db.contains(i.db_id.as_str()))
        .collect();
    if let Some(n) = limit {
        items.truncate(n);
    }
    if items.is_empty() {
        log::warn!("no manifest items match the selection; nothing to run");
        return Ok(());
    }
    let records = run_items(&config, &items, &source)?;
    let mut failed = 0;
    for r in &records {
        let status = match r.run.status {
            RunStatus::Succeeded => "succeeded",
            RunStatus::FailedExecution => "failed_execution",
            RunStatus::Failed => "failed",
        };
        if r.run.status != RunStatus::Succeeded {
            failed += 1;
        }
        let detail = r
            .run
            .final_sql
            .as_deref()
            .or(r.run.error.as_deref())
            .unwrap_or("")
            .replace('\n', " ");
        println!("{:<20} {:<17} {}", r.run.question_id, status, detail);
    }
    println!("run-records written to {}", config.paths.runs.as_ref().expect("set").display());
    if failed > 0 {
        return Err(Failure::Partial(format!("{failed} of {} runs did not succeed", records.len())));
    }
    Ok(())
}

fn eval(config: &RunConfig, mode: MatchMode, k: usize, out: Option<&Path>) -> CmdResult {
    let items = manifest_items(config)?;
    let runs_dir = config.paths.runs.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let runs: Vec<_> = load_run_records(&runs_dir)?.into_iter().map(|r| r.run).collect();
    let mut databases = BTreeMap::new();
    let ids: BTreeSet<&str> = items.iter().map(|i| i.db_id.as_str()).collect();
    for id in ids {
        match prepare_database(config, id) {
            Ok(a) => {
                databases.insert(
                    id.to_string(),
                    EvalDatabase {
                        backend: Box::new(SqliteBackend::new(&a.db_path)),
                        schema: a.compressed,
                    },
                );
            }
            Err(e) => log::error!("{id}: {e}"),
        }
    }
    let options = EvalOptions {
        mode,
        k: k.max(1),
        dialect: config.dialect,
    };
    let report = evaluate(&runs, &items, &databases, &options);
    print!("{}", report.to_text());
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&report).expect("serializable");
        std::fs::write(path, text).map_err(|e| Failure::Partial(format!("cannot write {}: {e}", path.display())))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn report(input: &Path, per_question: bool) -> CmdResult {
    let text = std::fs::read_to_string(input).map_err(|e| Failure::Config(format!("cannot read {}: {e}", input.display())))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{} is not an evaluation report: {e}", input.display())))?;
    print!("{}", report.to_text());
    if per_question {
        println!();
        println!("{:<20}{:<12}{:>8}{:>9}{:>11}{:>8}", "question", "difficulty", "strict", "lenient", "filter P/R", "recall");
        for o in &report.outcomes {
            let filter = match (o.filter_precision, o.filter_recall) {
                (Some(p), Some(r)) => format!("{p:.2}/{r:.2}"),
                _ => "-".into(),
            };
            println!(
                "{:<20}{:<12}{:>8}{:>9}{:>11}{:>8}",
                o.question_id,
                o.difficulty.as_deref().unwrap_or("-"),
                o.strict_ex,
                o.lenient_ex,
                filter,
                o.recall_at_k.map_or_else(|| "-".into(), |r| r.to_string())
            );
        }
    }
    Ok(())
}

fn demo(dir: &Path) -> CmdResult {
    let io = |e: std::io::Error| Failure::Partial(e.to_string());
    let db_dir = dir.join("databases");
    std::fs::create_dir_all(&db_dir).map_err(io)?;
    toy::create_database(&db_dir.join(format!("{}.sqlite", toy::DB_ID))).map_err(|e| Failure::Partial(e.to_string()))?;
    let manifest: String = toy::items()
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect();
    std::fs::write(dir.join("questions.jsonl"), manifest).map_err(io)?;
    let config_text = format!(
        "token_budget = {}\n\n[paths]\ndatabases = \"databases\"\nmanifest = \"questions.jsonl\"\nartifacts = \"artifacts\"\nruns = \"runs\"\ncassette = \"cassette.jsonl\"\n",
        toy::TOKEN_BUDGET
    );
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config_text).map_err(io)?;

    // Record the scripted model once; `run --replay` then needs no network.
    let config = load_config(Some(&config_path), &Overrides::default())?;
    let cassette = dir.join("cassette.jsonl");
    let _ = std::fs::remove_file(&cassette);
    let recorder = RecordingBackend::create(Arc::new(toy::scripted_backend()), &cassette).map_err(|e| Failure::Partial(e.to_string()))?;
    let recording = RunConfig {
        paths: viewsql_core::config::PathsConfig { runs: None, ..config.paths.clone() },
        ..config
    };
    run_items(&recording, &toy::items(), &ChatSource::Backend(Arc::new(recorder)))?;
    println!("demo written to {}", dir.display());
    println!("next:");
    println!("  viewsql -c {} run --replay {}", config_path.display(), cassette.display());
    println!("  viewsql -c {} eval --out {}", config_path.display(), dir.join("report.json").display());
    Ok(())
}
