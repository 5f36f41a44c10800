//! Acceptance suite. Runs every criterion at its stated tolerance and
//! time limit and prints one PASS/FAIL line each.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewsql_core::agents::{AgentSuite, AgentView, CteDef, PromptTemplates, RewrittenQuestion, SelectionRecord};
use viewsql_core::catalog::{estimate_tokens, ColumnDef, DataType, DetailLevel, ForeignKeyRef, SchemaCatalog, TableDef};
use viewsql_core::compress::{compress_schema, CompressedCatalog};
use viewsql_core::eval::{evaluate, filter_quality, lenient_match, recall_at_k, strict_match, EvalDatabase, EvalOptions, MatchMode};
use viewsql_core::exec::{CellValue, ExecutionBackend, ExecutionResult, SqliteBackend};
use viewsql_core::llm::{AgentRole, ChatBackend, LlmGateway, RecordingBackend, ReplayBackend, ScriptedBackend, UsageLedger};
use viewsql_core::pipeline::{
    check_consistency, run_sql_generation, run_view_generation, ChunkStatus, ExecRecord, FilteredSchema, PipelineConfig,
    ViewContext,
};
use viewsql_core::runner::{prepare_database, run_items, ChatSource};
use viewsql_core::split::split_schema;
use viewsql_core::sql::{extract_references, parse, SqlDialect};
use viewsql_core::toy;
use viewsql_core::values::{normalize_value, EmbeddingProvider, LshParams, NgramEmbedding, RetrieveOptions, ValueIndex};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    number: u8,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { number: 1, name: "compression fixture", limit: Duration::from_secs(1), run: compression_fixture },
        Criterion { number: 2, name: "splitting properties", limit: Duration::from_secs(5), run: splitting_properties },
        Criterion { number: 3, name: "value retrieval", limit: Duration::from_secs(10), run: value_retrieval },
        Criterion { number: 4, name: "consistency rules", limit: Duration::from_secs(1), run: consistency_rules },
        Criterion { number: 5, name: "view loop semantics", limit: Duration::from_secs(2), run: view_loop_semantics },
        Criterion { number: 6, name: "SQL loop semantics", limit: Duration::from_secs(2), run: sql_loop_semantics },
        Criterion { number: 7, name: "end-to-end determinism", limit: Duration::from_secs(10), run: end_to_end_determinism },
        Criterion { number: 8, name: "evaluator correctness", limit: Duration::from_secs(5), run: evaluator_correctness },
        Criterion { number: 9, name: "filter quality", limit: Duration::from_secs(1), run: filter_quality_fixtures },
        Criterion { number: 10, name: "recall at k", limit: Duration::from_secs(1), run: recall_monotone },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; exceeded the {} ms limit", c.limit.as_millis())),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.clone())
            }
        };
        println!(
            "{tag} criterion {:>2} {:<24} {:>6} ms (limit {:>5} ms)  {detail}",
            c.number,
            c.name,
            elapsed.as_millis(),
            c.limit.as_millis()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn ga_fixture() -> SchemaCatalog {
    let session_columns = || {
        vec![
            ColumnDef::new("visitorId", DataType::Integer),
            ColumnDef::new("visitNumber", DataType::Integer),
            ColumnDef::new("visitId", DataType::Integer),
            ColumnDef::new("visitStartTime", DataType::Integer),
            ColumnDef::new("date", DataType::Text),
            ColumnDef::new("totals", DataType::Other),
            ColumnDef::new("trafficSource", DataType::Other),
            ColumnDef::new("device", DataType::Other),
            ColumnDef::new("geoNetwork", DataType::Other),
            ColumnDef::new("hits", DataType::Other),
            ColumnDef::new("fullVisitorId", DataType::Text),
            ColumnDef::new("channelGrouping", DataType::Text),
        ]
    };
    let mut tables: Vec<TableDef> = (1..=28).map(|d| TableDef::new(format!("GA_SESSIONS_201702{d:02}"), session_columns())).collect();
    tables.push(TableDef::new("PRODUCTS", vec![ColumnDef::new("sku", DataType::Text), ColumnDef::new("name", DataType::Text)]));
    tables.push(TableDef::new("REGIONS", vec![ColumnDef::new("code", DataType::Text), ColumnDef::new("label", DataType::Text)]));
    SchemaCatalog::new("ga360", tables, vec![]).expect("valid fixture")
}

fn compression_fixture() -> Outcome {
    let original = ga_fixture();
    let compressed = compress_schema(&original);
    let names: Vec<&str> = compressed.catalog.tables.iter().map(|t| t.name.as_str()).collect();
    ensure!(names.len() == 3, "expected 3 tables, got {names:?}");
    ensure!(compressed.table_clusters.len() == 1, "expected one table cluster, got {}", compressed.table_clusters.len());
    let cluster = &compressed.table_clusters[0];
    ensure!(cluster.pattern == "GA_SESSIONS_{NUM}", "cluster pattern {}", cluster.pattern);
    ensure!(cluster.members.len() == 28, "cluster has {} members", cluster.members.len());

    let before = estimate_tokens(&original.serialize(DetailLevel::Full));
    let after = estimate_tokens(&compressed.catalog.serialize(DetailLevel::Full));
    let ratio = before as f64 / after as f64;
    ensure!(ratio >= 8.0, "token shrink {ratio:.2}x below 8x ({before} -> {after})");

    // Lossless inventory: every original table and column is recovered.
    let mut recovered_tables = BTreeSet::new();
    let mut recovered_columns = BTreeSet::new();
    for t in &compressed.catalog.tables {
        for member in compressed.expand_name(&t.name).map_err(|e| e.to_string())? {
            for c in &t.columns {
                for col in compressed.expand_column(&t.name, &c.name).map_err(|e| e.to_string())? {
                    recovered_columns.insert(format!("{member}.{col}"));
                }
            }
            recovered_tables.insert(member);
        }
    }
    let original_tables: BTreeSet<String> = original.tables.iter().map(|t| t.name.clone()).collect();
    let original_columns: BTreeSet<String> = original
        .tables
        .iter()
        .flat_map(|t| t.columns.iter().map(move |c| format!("{}.{}", t.name, c.name)))
        .collect();
    ensure!(recovered_tables == original_tables, "table inventory differs");
    ensure!(recovered_columns == original_columns, "column inventory differs");

    let again = compress_schema(&compressed.catalog);
    ensure!(again.catalog == compressed.catalog, "compression is not idempotent");
    ensure!(again.table_clusters.is_empty(), "second pass found new clusters");
    Ok(format!("30 -> 3 tables, 28-member cluster, {ratio:.1}x fewer tokens"))
}

// ---------------------------------------------------------------------------
// 2

fn random_catalog(rng: &mut ChaCha8Rng) -> SchemaCatalog {
    let n = rng.random_range(0..40);
    let mut tables = Vec::new();
    for i in 0..n {
        let cols = (0..rng.random_range(1..12))
            .map(|j| {
                let c = ColumnDef::new(format!("col_{j}"), DataType::Text);
                if rng.random_bool(0.2) {
                    c.with_description("d".repeat(rng.random_range(0..400)))
                } else {
                    c
                }
            })
            .collect();
        tables.push(TableDef::new(format!("table_{i}"), cols));
    }
    let mut relations = Vec::new();
    if n > 1 {
        for _ in 0..rng.random_range(0..n) {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                relations.push(ForeignKeyRef::new(format!("table_{a}"), "col_0", format!("table_{b}"), "col_0"));
            }
        }
        relations.sort();
        relations.dedup();
    }
    SchemaCatalog::new("random", tables, relations).expect("valid random catalog")
}

fn splitting_properties() -> Outcome {
    let mut chunks_seen = 0;
    let mut oversize_seen = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = random_catalog(&mut rng);
        let budget = rng.random_range(40..800);
        let partition = split_schema(&catalog, budget);
        for chunk in &partition.chunks {
            let tokens = estimate_tokens(&chunk.serialize(DetailLevel::Full));
            if chunk.oversize {
                oversize_seen += 1;
                ensure!(chunk.tables.len() == 1, "seed {seed}: oversize chunk with {} tables", chunk.tables.len());
                ensure!(tokens >= budget, "seed {seed}: chunk flagged oversize at {tokens} < {budget}");
            } else {
                ensure!(tokens < budget, "seed {seed}: chunk {} has {tokens} tokens, budget {budget}", chunk.index);
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for chunk in &partition.chunks {
            for t in &chunk.tables {
                *counts.entry(t.name.as_str()).or_default() += 1;
            }
        }
        ensure!(counts.len() == catalog.tables.len(), "seed {seed}: cover misses tables");
        ensure!(counts.values().all(|&c| c == 1), "seed {seed}: a table appears in two chunks");
        for t in &catalog.tables {
            ensure!(counts.contains_key(t.name.as_str()), "seed {seed}: {} not covered", t.name);
        }
        ensure!(split_schema(&catalog, budget) == partition, "seed {seed}: split is not deterministic");
        chunks_seen += partition.chunks.len();
    }
    Ok(format!("100 catalogs, {chunks_seen} chunks ({oversize_seen} oversize)"))
}

// ---------------------------------------------------------------------------
// 3

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn oracle_edit(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        1.0
    } else {
        1.0 - levenshtein(a, b) as f64 / len as f64
    }
}

fn random_word(rng: &mut ChaCha8Rng, alphabet: &[u8]) -> String {
    (0..rng.random_range(2..9)).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect()
}

fn mutate(rng: &mut ChaCha8Rng, word: &str, alphabet: &[u8]) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    for _ in 0..rng.random_range(1..3) {
        let pos = rng.random_range(0..=chars.len());
        let c = alphabet[rng.random_range(0..alphabet.len())] as char;
        match rng.random_range(0..3) {
            0 if pos < chars.len() => chars[pos] = c,
            1 if pos < chars.len() && chars.len() > 1 => {
                chars.remove(pos);
            }
            _ => chars.insert(pos, c),
        }
    }
    chars.into_iter().collect()
}

fn value_retrieval() -> Outcome {
    let options = RetrieveOptions { tau_edit: 0.5, tau_semantic: 0.5, limit: 10 };
    let embed = NgramEmbedding;

    let mut index = ValueIndex::new("geo", LshParams::default());
    for v in ["US", "Germany", "France", "United Kingdom", "Brazil"] {
        index.insert("customers", "country", v);
    }
    let found = index.retrieve("USA", &options, &embed).map_err(|e| e.to_string())?;
    ensure!(found.first().is_some_and(|c| c.entry.value == "US"), "USA did not retrieve US: {found:?}");

    let params = LshParams::default();
    ensure!(params.bands == 128 && params.rows == 1, "default LSH is not 128 x 1");
    let unlimited = RetrieveOptions { limit: usize::MAX, ..options };
    let alphabet = b"abcdef";
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut returned = 0;
    for pair in 0..1000 {
        let query = random_word(&mut rng, alphabet);
        let mut store = BTreeSet::new();
        for _ in 0..12 {
            store.insert(random_word(&mut rng, alphabet));
        }
        for _ in 0..4 {
            store.insert(mutate(&mut rng, &query, alphabet));
        }
        let mut index = ValueIndex::new("r", params);
        for v in &store {
            index.insert("t", "c", v);
        }
        let got = index.retrieve(&query, &unlimited, &embed).map_err(|e| e.to_string())?;
        let q = normalize_value(&query);
        for c in &got {
            let exact = c.entry.normalized == q;
            let edit = oracle_edit(&q, &c.entry.normalized);
            let sem = embed.similarity(&q, &c.entry.normalized).map_err(|e| e.to_string())?;
            ensure!(
                exact || (edit >= 0.5 && sem >= 0.5),
                "pair {pair}: {} returned for {q} with edit {edit:.3}, semantic {sem:.3}",
                c.entry.value
            );
        }
        let naive: BTreeSet<String> = store
            .iter()
            .filter(|v| {
                let n = normalize_value(v);
                n == q || (oracle_edit(&q, &n) >= 0.5 && embed.similarity(&q, &n).unwrap_or(0.0) >= 0.5)
            })
            .cloned()
            .collect();
        let lsh: BTreeSet<String> = got.iter().map(|c| c.entry.value.clone()).collect();
        ensure!(lsh == naive, "pair {pair} ({q}): LSH {lsh:?} != scan {naive:?}");
        returned += got.len();
    }
    Ok(format!("USA -> US; 1000 random pairs sound and equal to the scan ({returned} hits)"))
}

// ---------------------------------------------------------------------------
// 4

fn consistency_catalog() -> SchemaCatalog {
    SchemaCatalog::new(
        "m",
        vec![
            TableDef::new("t", vec![ColumnDef::new("a", DataType::Integer), ColumnDef::new("c", DataType::Integer)]),
            TableDef::new("u", vec![ColumnDef::new("b", DataType::Integer)]),
            TableDef::new("w", vec![ColumnDef::new("d", DataType::Integer)]),
        ],
        vec![],
    )
    .expect("valid")
}

fn consistency_rules() -> Outcome {
    let catalog = consistency_catalog();
    let views: [(&str, Option<&str>); 3] = [
        ("empty", None),
        ("t.a", Some("SELECT a FROM t")),
        ("t.a+u.b", Some("SELECT t.a, u.b FROM t CROSS JOIN u")),
    ];
    let selection = |tables: &[&str], columns: &[&str]| SelectionRecord {
        tables: tables.iter().map(|s| s.to_string()).collect(),
        columns: columns.iter().map(|s| s.to_string()).collect(),
    };
    let selections = [
        ("empty", selection(&[], &[])),
        ("{t:[a]}", selection(&["t"], &["t.a"])),
        ("{t:[a],u:[b]}", selection(&["t", "u"], &["t.a", "u.b"])),
        ("{t:[a,c],u:[b],w:[d]}", selection(&["t", "u", "w"], &["t.a", "t.c", "u.b", "w.d"])),
        ("{t:[a,c]}", selection(&["t"], &["t.a", "t.c"])),
        ("{t:[],u:[]}", selection(&["t", "u"], &[])),
    ];
    let mut cells = 0;
    let mut redundancy_accepted = 0;
    for (vname, sql) in views {
        let view = sql.map(|s| AgentView {
            chunk_index: 1,
            ctes: vec![CteDef { name: "v".into(), sql: s.into() }],
            rationale: String::new(),
            sample_result: None,
        });
        let refs = match &view {
            Some(v) => {
                let program = parse(&v.program_text(), SqlDialect::Sqlite).map_err(|e| e.to_string())?;
                extract_references(&program, &catalog).map_err(|e| e.to_string())?
            }
            None => Default::default(),
        };
        // Independent reading of the three rules.
        let used_tables: BTreeSet<&str> = match vname {
            "empty" => BTreeSet::new(),
            "t.a" => ["t"].into(),
            _ => ["t", "u"].into(),
        };
        let used_columns: BTreeSet<&str> = match vname {
            "empty" => BTreeSet::new(),
            "t.a" => ["t.a"].into(),
            _ => ["t.a", "u.b"].into(),
        };
        ensure!(
            refs.tables.iter().map(String::as_str).collect::<BTreeSet<_>>() == used_tables
                && refs.columns.iter().map(String::as_str).collect::<BTreeSet<_>>() == used_columns,
            "view {vname}: references {refs:?}"
        );
        for (sname, sel) in &selections {
            let non_empty_view = view.is_some();
            let mut expected = Vec::new();
            if non_empty_view && sel.tables.is_empty() && sel.columns.is_empty() {
                expected.push(1u8);
            }
            if non_empty_view && sel.columns.is_empty() {
                expected.push(2);
            }
            for t in &used_tables {
                if !sel.tables.contains(*t) {
                    expected.push(3);
                }
            }
            for c in &used_columns {
                if !sel.columns.contains(*c) {
                    expected.push(3);
                }
            }
            let verdict = check_consistency(view.as_ref(), sel, &refs);
            let got: Vec<u8> = verdict.violations.iter().map(|v| v.rule).collect();
            ensure!(got == expected, "view {vname} x selection {sname}: rules {got:?}, expected {expected:?}");
            ensure!(verdict.consistent == expected.is_empty(), "verdict flag disagrees with violations");
            let extra = sel.tables.len() > used_tables.len() || sel.columns.len() > used_columns.len();
            if verdict.consistent && extra {
                redundancy_accepted += 1;
            }
            cells += 1;
        }
    }
    ensure!(redundancy_accepted >= 3, "redundant selections were not accepted");
    Ok(format!("{cells} cells match, {redundancy_accepted} redundant selections accepted"))
}

// ---------------------------------------------------------------------------
// 5 and 6

struct ToyDb {
    _dir: tempfile::TempDir,
    schema: CompressedCatalog,
    partition: viewsql_core::split::SchemaPartition,
    backend: SqliteBackend,
    index: ValueIndex,
}

fn toy_db() -> ToyDb {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("toy.sqlite");
    toy::create_database(&path).expect("toy database");
    let catalog = viewsql_core::catalog::ingest_from_database(&path).expect("ingest");
    let index = viewsql_core::values::build_index(&path, &catalog, LshParams::default()).expect("index");
    ToyDb {
        partition: split_schema(&catalog, toy::TOKEN_BUDGET),
        schema: compress_schema(&catalog),
        backend: SqliteBackend::new(&path).with_frozen_clock(),
        index,
        _dir: dir,
    }
}

fn suite_over(backend: Arc<dyn ChatBackend>) -> AgentSuite {
    AgentSuite::new(LlmGateway::new(backend, "scripted"), PromptTemplates::builtin(), SqlDialect::Sqlite)
}

/// Records `script` to a cassette while running `f`, then runs `f` again
/// from the cassette alone. Returns both results and the scripted requests.
fn record_then_replay<T>(
    script: ScriptedBackend,
    f: impl Fn(&AgentSuite) -> T,
) -> Result<(T, T, Vec<viewsql_core::llm::ChatRequest>), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cassette = dir.path().join("cassette.jsonl");
    let script = Arc::new(script);
    let recorder = RecordingBackend::create(script.clone(), &cassette).map_err(|e| e.to_string())?;
    let recorded = f(&suite_over(Arc::new(recorder)));
    let replay = ReplayBackend::load(&cassette).map_err(|e| e.to_string())?;
    let replayed = f(&suite_over(Arc::new(replay)));
    Ok((recorded, replayed, script.requests()))
}

const SELECT_ALL: &str = "```json\n{\"tables\": [], \"columns\": []}\n```";

fn view_loop_semantics() -> Outcome {
    let db = toy_db();
    let names: Vec<Vec<&str>> = db.partition.chunks.iter().map(|c| c.table_names()).collect();
    ensure!(
        names == vec![vec!["customers", "products"], vec!["orders"], vec!["order_items"]],
        "unexpected toy partition {names:?}"
    );
    let syntax_error = "```sql\nWITH v AS (SELECT name FROM customers WHERE country = 'US' ORDER)\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.name\", \"customers.country\"]}\n```";
    let valid = "```sql\nWITH v AS (SELECT name FROM customers WHERE country = 'US')\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.name\", \"customers.country\"]}\n```";
    let inconsistent = "```sql\nWITH o AS (SELECT id FROM orders WHERE status = 'shipped')\n```\n```json\n{\"tables\": [\"orders\"], \"columns\": [\"orders.id\"]}\n```";
    let script = ScriptedBackend::new()
        .on_containing(AgentRole::ViewGenerator, "table(customers)", &[syntax_error, valid])
        .on_containing(AgentRole::ViewGenerator, "table(orders)", &[inconsistent])
        .on_containing(AgentRole::ViewGenerator, "table(order_items)", &[SELECT_ALL]);
    let config = PipelineConfig::default();
    let question = RewrittenQuestion::fallback("names of customers in the US", "");
    let (recorded, replayed, requests) = record_then_replay(script, |suite| {
        let ctx = ViewContext {
            suite,
            schema: &db.schema,
            backend: &db.backend,
            index: Some(&db.index),
            embedder: &NgramEmbedding,
            config: &config,
        };
        run_view_generation(&ctx, &question, &db.partition).map_err(|e| e.error.to_string())
    })?;
    let generation = replayed?;
    ensure!(recorded? == generation, "replayed view generation differs from the recording");

    let outcomes = &generation.chunk_outcomes;
    let (a, b, c) = (&outcomes[0], &outcomes[1], &outcomes[2]);
    ensure!(a.status == ChunkStatus::Accepted && a.iterations_used == 2, "(a) {:?} after {}", a.status, a.iterations_used);
    let error = a.attempts[0].execution_error.clone().ok_or("(a) first attempt recorded no error")?;
    let second_prompt = requests
        .iter()
        .filter(|r| r.agent_role == AgentRole::ViewGenerator)
        .filter_map(|r| r.messages.last())
        .filter(|m| m.content.contains("table(customers)"))
        .nth(1)
        .ok_or("(a) no second prompt")?;
    ensure!(second_prompt.content.contains(&error), "(a) second prompt lacks the error {error:?}");
    ensure!(
        b.status == ChunkStatus::RejectedAfterTmax && b.iterations_used == config.t_max,
        "(b) {:?} after {}",
        b.status,
        b.iterations_used
    );
    ensure!(c.status == ChunkStatus::Irrelevant, "(c) {:?}", c.status);

    ensure!(generation.views.len() == 1 && generation.views[0].chunk_index == 1, "aggregation kept {:?}", generation.views);
    ensure!(!generation.filtered_schema.tables.contains("orders"), "rejected chunk leaked into the filtered schema");
    let excluded = FilteredSchema::aggregate(&[a.clone(), c.clone()]);
    ensure!(excluded == generation.filtered_schema, "dropping the rejected chunk changes the union");

    for o in outcomes.iter().filter(|o| o.status == ChunkStatus::Accepted) {
        let view = o.view.as_ref().ok_or("accepted chunk without a view")?;
        let program = parse(&view.program_text(), SqlDialect::Sqlite).map_err(|e| e.to_string())?;
        let refs = extract_references(&program, &db.schema).map_err(|e| e.to_string())?;
        ensure!(refs.tables.is_subset(&generation.filtered_schema.tables), "T_V not within T*");
        ensure!(refs.columns.is_subset(&generation.filtered_schema.columns), "C_V not within C*");
        ensure!(db.backend.execute(&view.program_text(), &config.exec_limits).is_ok(), "aggregated view fails to execute");
    }
    Ok("syntax error then success -> 2 iterations; T_max failures rejected; empty selection irrelevant; superset holds".into())
}

const PLAN: &str = "```json\n{\"steps\": [\"count the orders\"]}\n```";

fn sql_loop_semantics() -> Outcome {
    let db = toy_db();
    let config = PipelineConfig::default();
    let question = RewrittenQuestion::fallback("how many shipped orders are there", "");
    let failing = "SELECT COUNT(*) FROM orders WHERE state = 'shipped'";
    let passing = "SELECT COUNT(*) FROM orders WHERE status = 'shipped'";
    let script = ScriptedBackend::new()
        .on(AgentRole::Planner, &[PLAN])
        .on(AgentRole::SqlGenerator, &[&format!("```sql\n{failing}\n```"), &format!("```sql\n{passing}\n```")])
        .on(AgentRole::Revisor, &["VERDICT: CORRECT"]);
    let (_, replayed, _) = record_then_replay(script, |suite| {
        run_sql_generation(suite, &db.backend, &config, &question, &[], "schema").map_err(|e| e.to_string())
    })?;
    let generation = replayed?;
    let chosen = generation.chosen();
    ensure!(chosen.sql_iterations.len() == 2, "{} sql_iterations", chosen.sql_iterations.len());
    ensure!(matches!(chosen.sql_iterations[0].outcome, Some(ExecRecord::Error(_))), "first attempt did not fail");
    ensure!(chosen.final_sql == passing, "final_sql {}", chosen.final_sql);

    let edited = "SELECT COUNT(*) AS shipped_orders FROM orders WHERE status = 'shipped'";
    let script = ScriptedBackend::new()
        .on(AgentRole::Planner, &[PLAN])
        .on(AgentRole::SqlGenerator, &[&format!("```sql\n{passing}\n```")])
        .on(AgentRole::Revisor, &[&format!("VERDICT: REVISED\n```sql\n{edited}\n```")]);
    let (_, replayed, _) = record_then_replay(script, |suite| {
        run_sql_generation(suite, &db.backend, &config, &question, &[], "schema").map_err(|e| e.to_string())
    })?;
    let generation = replayed?;
    let chosen = generation.chosen();
    ensure!(chosen.final_sql == edited, "final_sql {}", chosen.final_sql);
    let direct = db.backend.execute(edited, &config.exec_limits).map_err(|e| e.message)?;
    ensure!(chosen.final_outcome.result() == Some(&direct), "edited SQL was not re-executed");
    ensure!(direct.columns == vec!["shipped_orders".to_string()], "edited result columns {:?}", direct.columns);
    Ok("fail then pass -> 2 iterations and the passing SQL; edited SQL re-executed".into())
}

// ---------------------------------------------------------------------------
// 7

fn end_to_end_determinism() -> Outcome {
    let ws = common::toy_workspace();
    let items = toy::items();
    // Same config both times; the runs directory is part of the config
    // snapshot, so it is emptied between runs rather than varied.
    let runs_dir = ws.root().join("runs");
    let mut config = ws.config.clone();
    config.paths.runs = Some(runs_dir.clone());
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&runs_dir);
        run_items(&config, &items, &ChatSource::Replay(ws.cassette.clone())).map_err(|e| e.to_string())?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&runs_dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            files.insert(path.clone(), std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        outputs.push(files);
    }
    ensure!(outputs[0].len() == 5, "expected 5 run-records, found {}", outputs[0].len());
    ensure!(outputs[0] == outputs[1], "run-records differ between runs");

    let records = viewsql_core::runner::load_run_records(&runs_dir).map_err(|e| e.to_string())?;
    let artifacts = prepare_database(&ws.config, toy::DB_ID)?;
    let mut dbs = BTreeMap::new();
    dbs.insert(
        toy::DB_ID.to_string(),
        EvalDatabase { backend: Box::new(SqliteBackend::new(&artifacts.db_path)), schema: artifacts.compressed },
    );
    let runs: Vec<_> = records.into_iter().map(|r| r.run).collect();
    let report = evaluate(&runs, &items, &dbs, &EvalOptions::default());
    let correct = report.outcomes.iter().filter(|o| o.strict_ex == 1).count();
    ensure!(correct == 5, "strict EX {correct}/5\n{}", report.to_text());

    let mut ledger = UsageLedger::default();
    for r in &runs {
        ledger.merge(&r.ledger);
    }
    let pct_sum: f64 = report.ledger.iter().map(|r| r.token_pct).sum();
    ensure!((pct_sum - 100.0).abs() <= 0.1, "token percentages sum to {pct_sum}");
    // Recompute shares from the raw call list.
    let total: u64 = ledger.calls.iter().map(|c| c.input_tokens + c.output_tokens).sum();
    for row in &report.ledger {
        let raw: u64 = ledger
            .calls
            .iter()
            .filter(|c| c.agent_role == row.agent_role)
            .map(|c| c.input_tokens + c.output_tokens)
            .sum();
        let expected = 100.0 * raw as f64 / total as f64;
        ensure!((row.token_pct - expected).abs() < 1e-9, "{} share {} != {expected}", row.agent_role, row.token_pct);
    }
    Ok(format!("5 identical run-records, strict EX 5/5, token shares sum to {pct_sum:.2}"))
}

// ---------------------------------------------------------------------------
// 8

fn int_result(columns: usize, rows: &[Vec<i64>]) -> ExecutionResult {
    ExecutionResult::new(
        (0..columns).map(|i| format!("c{i}")).collect(),
        rows.iter().map(|r| r.iter().map(|&v| CellValue::Integer(v)).collect()).collect(),
    )
}

fn project(rows: &[Vec<i64>], cols: &[usize]) -> Vec<Vec<i64>> {
    rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect()
}

fn same_rows(a: Vec<Vec<i64>>, b: Vec<Vec<i64>>, ordered: bool) -> bool {
    if ordered {
        a == b
    } else {
        let (mut a, mut b) = (a, b);
        a.sort();
        b.sort();
        a == b
    }
}

fn oracle_strict(p: &(usize, Vec<Vec<i64>>), g: &(usize, Vec<Vec<i64>>), ordered: bool) -> u8 {
    (p.0 == g.0 && same_rows(p.1.clone(), g.1.clone(), ordered)) as u8
}

/// Tries every injective map from gold columns to predicted columns.
fn oracle_lenient(p: &(usize, Vec<Vec<i64>>), g: &(usize, Vec<Vec<i64>>), ordered: bool) -> u8 {
    fn maps(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !prefix.contains(&i) {
                prefix.push(i);
                maps(n, k, prefix, out);
                prefix.pop();
            }
        }
    }
    if g.0 > p.0 || p.1.len() != g.1.len() {
        return 0;
    }
    let mut all = Vec::new();
    maps(p.0, g.0, &mut Vec::new(), &mut all);
    let gold_cols: Vec<usize> = (0..g.0).collect();
    all.iter()
        .any(|m| same_rows(project(&p.1, m), project(&g.1, &gold_cols), ordered)) as u8
}

fn evaluator_correctness() -> Outcome {
    let gold = int_result(2, &[vec![1, 10], vec![2, 20], vec![3, 30]]);
    let swapped = int_result(2, &[vec![10, 1], vec![20, 2], vec![30, 3]]);
    let extra = int_result(3, &[vec![1, 10, 7], vec![2, 20, 7], vec![3, 30, 7]]);
    let missing = int_result(1, &[vec![1], vec![2], vec![3]]);
    let reordered = int_result(2, &[vec![3, 30], vec![1, 10], vec![2, 20]]);
    let matrix = [
        ("identical", &gold, false, (1, 1)),
        ("column-swapped", &swapped, false, (0, 1)),
        ("extra predicted column", &extra, false, (0, 1)),
        ("missing gold column", &missing, false, (0, 0)),
        ("ordered gold, reordered rows", &reordered, true, (0, 0)),
    ];
    for (name, pred, ordered, expected) in matrix {
        let got = (strict_match(pred, &gold, ordered), lenient_match(pred, &gold, ordered));
        ensure!(got == expected, "{name}: got {got:?}, expected {expected:?}");
    }
    ensure!(lenient_match(&reordered, &gold, false) == 1, "unordered gold should accept reordered rows");
    ensure!(
        lenient_match(&extra, &gold, false) == 1 && lenient_match(&gold, &extra, false) == 0,
        "lenient argument order is not respected"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut lenient_only = 0;
    for pair in 0..1000 {
        let gc = rng.random_range(1..4);
        let rows: Vec<Vec<i64>> = (0..rng.random_range(0..5)).map(|_| (0..gc).map(|_| rng.random_range(0..3)).collect()).collect();
        let mut prow = rows.clone();
        let mut pc = gc;
        match rng.random_range(0..6) {
            0 => {}
            1 => {
                let mut perm: Vec<usize> = (0..gc).collect();
                perm.shuffle(&mut rng);
                prow = project(&prow, &perm);
            }
            2 => {
                for r in prow.iter_mut() {
                    r.push(rng.random_range(0..3));
                }
                pc += 1;
            }
            3 if gc > 1 => {
                prow = project(&prow, &(0..gc - 1).collect::<Vec<_>>());
                pc -= 1;
            }
            4 => prow.shuffle(&mut rng),
            _ => {
                if let Some(r) = prow.first_mut() {
                    r[0] += 1;
                }
            }
        }
        let ordered = rng.random_bool(0.3);
        let p = int_result(pc, &prow);
        let g = int_result(gc, &rows);
        let (s, l) = (strict_match(&p, &g, ordered), lenient_match(&p, &g, ordered));
        ensure!(s == 0 || l == 1, "pair {pair}: strict 1 but lenient 0");
        ensure!(s == oracle_strict(&(pc, prow.clone()), &(gc, rows.clone()), ordered), "pair {pair}: strict disagrees with oracle");
        ensure!(l == oracle_lenient(&(pc, prow.clone()), &(gc, rows.clone()), ordered), "pair {pair}: lenient disagrees with oracle");
        ensure!(strict_match(&g, &g, ordered) == 1, "pair {pair}: strict(x, x) = 0");
        lenient_only += usize::from(l == 1 && s == 0);
    }
    Ok(format!("5-case matrix matches; 1000 random pairs agree with brute force ({lenient_only} lenient-only)"))
}

// ---------------------------------------------------------------------------
// 9

fn filter_catalog() -> SchemaCatalog {
    let cols = |names: &[&str]| names.iter().map(|n| ColumnDef::new(*n, DataType::Integer)).collect::<Vec<_>>();
    SchemaCatalog::new(
        "f",
        vec![
            TableDef::new("t", cols(&["a", "b", "c"])),
            TableDef::new("u", cols(&["a", "d", "e"])),
            TableDef::new("w", cols(&["f", "g"])),
        ],
        vec![],
    )
    .expect("valid")
}

fn brute_quality(selected: &BTreeSet<String>, gold: &BTreeSet<String>) -> (f64, f64) {
    let hit = selected.iter().filter(|s| gold.contains(*s)).count() as f64;
    let precision = match (selected.is_empty(), gold.is_empty()) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => hit / selected.len() as f64,
    };
    let recall = if gold.is_empty() { 1.0 } else { hit / gold.len() as f64 };
    (precision, recall)
}

fn filter_quality_fixtures() -> Outcome {
    let catalog = filter_catalog();
    let schema = CompressedCatalog::identity(catalog.clone());
    let worked = FilteredSchema {
        tables: ["t".to_string()].into(),
        columns: ["t.a".to_string(), "t.b".to_string()].into(),
        source: BTreeMap::new(),
    };
    let (p, r) = filter_quality(&worked, "SELECT a FROM t", &schema, SqlDialect::Sqlite).map_err(|e| e.to_string())?;
    ensure!((p - 2.0 / 3.0).abs() < 1e-12 && r == 1.0, "worked example gave ({p}, {r})");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for fixture in 0..50 {
        // Gold query over one table or a join of t and u.
        let mut gold = BTreeSet::new();
        let sql = if rng.random_bool(0.5) {
            let table = &catalog.tables[rng.random_range(0..catalog.tables.len())];
            let mut cols: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
            cols.shuffle(&mut rng);
            let chosen = &cols[..rng.random_range(1..=cols.len())];
            gold.insert(format!("table:{}", table.name));
            for c in chosen {
                gold.insert(format!("column:{}.{c}", table.name));
            }
            format!("SELECT {} FROM {}", chosen.join(", "), table.name)
        } else {
            let extra = ["b", "c"][rng.random_range(0..2)];
            let other = ["d", "e"][rng.random_range(0..2)];
            for e in ["table:t", "table:u", "column:t.a", "column:u.a"] {
                gold.insert(e.to_string());
            }
            gold.insert(format!("column:t.{extra}"));
            gold.insert(format!("column:u.{other}"));
            format!("SELECT t.{extra}, u.{other} FROM t JOIN u ON t.a = u.a")
        };
        let mut selection = FilteredSchema::default();
        for t in &catalog.tables {
            if rng.random_bool(0.5) {
                selection.tables.insert(t.name.clone());
                for c in &t.columns {
                    if rng.random_bool(0.5) {
                        selection.columns.insert(format!("{}.{}", t.name, c.name));
                    }
                }
            }
        }
        let selected: BTreeSet<String> = selection
            .tables
            .iter()
            .map(|t| format!("table:{t}"))
            .chain(selection.columns.iter().map(|c| format!("column:{c}")))
            .collect();
        let expected = brute_quality(&selected, &gold);
        let got = filter_quality(&selection, &sql, &schema, SqlDialect::Sqlite).map_err(|e| e.to_string())?;
        ensure!(
            (got.0 - expected.0).abs() < 1e-12 && (got.1 - expected.1).abs() < 1e-12,
            "fixture {fixture} ({sql}): got {got:?}, expected {expected:?}"
        );
    }
    Ok("worked example (2/3, 1.0); 50 random fixtures equal brute force".into())
}

// ---------------------------------------------------------------------------
// 10

fn recall_monotone() -> Outcome {
    let gold = int_result(1, &[vec![1], vec![2]]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in [MatchMode::Strict, MatchMode::Lenient] {
        for fixture in 0..50 {
            let correct_at = rng.random_range(0..4);
            let candidates: Vec<Option<ExecutionResult>> = (0..4)
                .map(|i| {
                    if i == correct_at {
                        Some(gold.clone())
                    } else if rng.random_bool(0.3) {
                        None
                    } else {
                        Some(int_result(1, &[vec![rng.random_range(3..9)]]))
                    }
                })
                .collect();
            let mut previous = 0;
            for k in [1usize, 2, 4] {
                let r = recall_at_k(&candidates[..k], &gold, mode, false);
                ensure!(r >= previous, "fixture {fixture}: recall fell at k = {k}");
                ensure!(r == u8::from(correct_at < k), "fixture {fixture}: k = {k} gave {r} with the hit at {correct_at}");
                previous = r;
            }
            let single = recall_at_k(&candidates[..1], &gold, mode, false);
            let direct = candidates[0].as_ref().map_or(0, |c| match mode {
                MatchMode::Strict => strict_match(c, &gold, false),
                MatchMode::Lenient => lenient_match(c, &gold, false),
            });
            ensure!(single == direct, "fixture {fixture}: k = 1 differs from the single-query metric");
        }
    }
    Ok("monotone over k in {1, 2, 4} on 100 fixtures".into())
}
