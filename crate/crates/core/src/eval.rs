//! Execution-accuracy scoring, schema-filter quality and reports over
//! run-records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::CompressedCatalog;
use crate::exec::{CellValue, ExecLimits, ExecutionBackend, ExecutionResult, EVAL_ROW_CAP};
use crate::llm::{LedgerRow, UsageLedger};
use crate::pipeline::{FilteredSchema, PipelineRun};
use crate::sql::{extract_references, parse, SchemaLookup, SqlDialect};

pub const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("gold SQL of {question_id} does not parse: {message}")]
    Gold { question_id: String, message: String },
    #[error("gold SQL of {question_id} failed to execute: {message}")]
    GoldExecution { question_id: String, message: String },
    #[error("no database registered for {0}")]
    UnknownDatabase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    pub gold_sql: String,
    #[serde(default)]
    pub difficulty: Option<String>,
}

/// Reads a JSON-lines manifest and checks every gold query parses.
pub fn load_manifest(path: &Path, dialect: SqlDialect) -> Result<Vec<BenchmarkItem>, EvalError> {
    let manifest_err = |message: String| EvalError::Manifest {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| manifest_err(e.to_string()))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem =
            serde_json::from_str(line).map_err(|e| manifest_err(format!("line {}: {e}", n + 1)))?;
        parse(&item.gold_sql, dialect).map_err(|e| EvalError::Gold {
            question_id: item.question_id.clone(),
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Strict,
    Lenient,
}

impl std::str::FromStr for MatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(MatchMode::Strict),
            "lenient" => Ok(MatchMode::Lenient),
            other => Err(format!("unknown match mode {other:?} (expected strict or lenient)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Cell and row comparison

fn cells_equal(a: &CellValue, b: &CellValue) -> bool {
    match (a, b) {
        (CellValue::Null, CellValue::Null) => true,
        (CellValue::Null, _) | (_, CellValue::Null) => false,
        (CellValue::Text(x), CellValue::Text(y)) => x.trim() == y.trim(),
        (CellValue::Text(_), _) | (_, CellValue::Text(_)) => false,
        _ => {
            let (x, y) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
            x == y || (x - y).abs() <= RELATIVE_TOLERANCE * x.abs().max(y.abs())
        }
    }
}

#[derive(PartialEq, PartialOrd)]
enum SortKey<'a> {
    Null,
    Number(f64),
    Text(&'a str),
}

/// Total order used to align unordered rows. Numbers are keyed at six
/// significant digits so values within tolerance sort together.
fn sort_key(c: &CellValue) -> SortKey<'_> {
    match c {
        CellValue::Null => SortKey::Null,
        CellValue::Text(s) => SortKey::Text(s.trim()),
        other => {
            let v = other.as_f64().unwrap_or(0.0);
            let rounded = if v == 0.0 || !v.is_finite() {
                v
            } else {
                let digits = 6 - v.abs().log10().ceil() as i32;
                let scale = 10f64.powi(digits);
                (v * scale).round() / scale
            };
            SortKey::Number(rounded)
        }
    }
}

fn compare_rows(a: &[&CellValue], b: &[&CellValue]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = sort_key(x).partial_cmp(&sort_key(y)).unwrap_or(std::cmp::Ordering::Equal);
        if o != std::cmp::Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn rows_equal(a: &[&CellValue], b: &[&CellValue]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| cells_equal(x, y))
}

fn project<'a>(r: &'a ExecutionResult, cols: &[usize]) -> Vec<Vec<&'a CellValue>> {
    r.rows.iter().map(|row| cols.iter().map(|&c| &row[c]).collect()).collect()
}

/// Compares two row lists projected onto column indices.
fn projected_equal(
    pred: &ExecutionResult,
    pred_cols: &[usize],
    gold: &ExecutionResult,
    gold_cols: &[usize],
    ordered: bool,
) -> bool {
    if pred.rows.len() != gold.rows.len() {
        return false;
    }
    let mut p = project(pred, pred_cols);
    let mut g = project(gold, gold_cols);
    if !ordered {
        p.sort_by(|a, b| compare_rows(a, b));
        g.sort_by(|a, b| compare_rows(a, b));
    }
    p.iter().zip(&g).all(|(a, b)| rows_equal(a, b))
}

/// Same columns in the same positions with the same rows. Rows are compared
/// in order only when the gold query orders them.
pub fn strict_match(predicted: &ExecutionResult, gold: &ExecutionResult, gold_has_order_by: bool) -> u8 {
    if predicted.columns.len() != gold.columns.len() {
        return 0;
    }
    let cols: Vec<usize> = (0..gold.columns.len()).collect();
    projected_equal(predicted, &cols, gold, &cols, gold_has_order_by) as u8
}

/// Every gold column is found in a distinct predicted column, with rows
/// aligned jointly across the mapped columns. Extra predicted columns are
/// ignored. Not symmetric: `gold` is the reference.
pub fn lenient_match(predicted: &ExecutionResult, gold: &ExecutionResult, gold_has_order_by: bool) -> u8 {
    let g = gold.columns.len();
    if g > predicted.columns.len() || predicted.rows.len() != gold.rows.len() {
        return 0;
    }
    // Per-column compatibility prunes the mapping search.
    let compatible: Vec<Vec<usize>> = (0..g)
        .map(|gc| {
            (0..predicted.columns.len())
                .filter(|&pc| projected_equal(predicted, &[pc], gold, &[gc], gold_has_order_by))
                .collect()
        })
        .collect();
    if compatible.iter().any(Vec::is_empty) {
        return 0;
    }
    let mut mapping = Vec::with_capacity(g);
    let mut used = vec![false; predicted.columns.len()];
    search_mapping(predicted, gold, gold_has_order_by, &compatible, &mut mapping, &mut used) as u8
}

fn search_mapping(
    predicted: &ExecutionResult,
    gold: &ExecutionResult,
    ordered: bool,
    compatible: &[Vec<usize>],
    mapping: &mut Vec<usize>,
    used: &mut [bool],
) -> bool {
    let i = mapping.len();
    if i == compatible.len() {
        let gold_cols: Vec<usize> = (0..i).collect();
        return ordered || projected_equal(predicted, mapping, gold, &gold_cols, false);
    }
    for &pc in &compatible[i] {
        if used[pc] {
            continue;
        }
        used[pc] = true;
        mapping.push(pc);
        if search_mapping(predicted, gold, ordered, compatible, mapping, used) {
            return true;
        }
        mapping.pop();
        used[pc] = false;
    }
    false
}

pub fn match_results(mode: MatchMode, predicted: &ExecutionResult, gold: &ExecutionResult, ordered: bool) -> u8 {
    match mode {
        MatchMode::Strict => strict_match(predicted, gold, ordered),
        MatchMode::Lenient => lenient_match(predicted, gold, ordered),
    }
}

/// 1 when any candidate matches the gold result.
pub fn recall_at_k(candidates: &[Option<ExecutionResult>], gold: &ExecutionResult, mode: MatchMode, gold_has_order_by: bool) -> u8 {
    candidates
        .iter()
        .flatten()
        .any(|c| match_results(mode, c, gold, gold_has_order_by) == 1) as u8
}

// ---------------------------------------------------------------------------
// Schema-filter quality

fn element_set(tables: &BTreeSet<String>, columns: &BTreeSet<String>) -> BTreeSet<String> {
    tables
        .iter()
        .map(|t| format!("table:{}", t.to_ascii_lowercase()))
        .chain(columns.iter().map(|c| format!("column:{}", c.to_ascii_lowercase())))
        .collect()
}

/// Precision and recall of selected elements against the tables and
/// columns the gold query reads.
pub fn filter_quality(
    filtered: &FilteredSchema,
    gold_sql: &str,
    schema: &dyn SchemaLookup,
    dialect: SqlDialect,
) -> Result<(f64, f64), crate::sql::SqlError> {
    let program = parse(gold_sql, dialect)?;
    let refs = extract_references(&program, schema)?;
    let selected = element_set(&filtered.tables, &filtered.columns);
    let gold = element_set(&refs.tables, &refs.columns);
    Ok(set_quality(&selected, &gold))
}

/// Precision and recall of `selected` against `gold`. An empty gold set has
/// recall 1.
pub fn set_quality(selected: &BTreeSet<String>, gold: &BTreeSet<String>) -> (f64, f64) {
    let hit = selected.intersection(gold).count() as f64;
    let precision = if selected.is_empty() {
        if gold.is_empty() { 1.0 } else { 0.0 }
    } else {
        hit / selected.len() as f64
    };
    let recall = if gold.is_empty() { 1.0 } else { hit / gold.len() as f64 };
    (precision, recall)
}

// ---------------------------------------------------------------------------
// Per-item evaluation and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub question_id: String,
    #[serde(default)]
    pub difficulty: Option<String>,
    pub strict_ex: u8,
    pub lenient_ex: u8,
    #[serde(default)]
    pub filter_precision: Option<f64>,
    #[serde(default)]
    pub filter_recall: Option<f64>,
    #[serde(default)]
    pub recall_at_k: Option<u8>,
    /// Why the prediction could not be scored, if it could not.
    #[serde(default)]
    pub note: Option<String>,
}

pub struct EvalDatabase {
    pub backend: Box<dyn ExecutionBackend>,
    pub schema: CompressedCatalog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: MatchMode,
    /// Candidates considered for recall; 1 disables the recall column.
    pub k: usize,
    pub dialect: SqlDialect,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: MatchMode::Strict,
            k: 1,
            dialect: SqlDialect::Sqlite,
        }
    }
}

fn eval_limits() -> ExecLimits {
    ExecLimits::default().with_row_cap(EVAL_ROW_CAP)
}

/// Scores one run against its item. Predictions are re-executed with the
/// evaluation row cap.
pub fn evaluate_item(run: &PipelineRun, item: &BenchmarkItem, db: &EvalDatabase, options: &EvalOptions) -> Result<EvalOutcome, EvalError> {
    let gold_program = parse(&item.gold_sql, options.dialect).map_err(|e| EvalError::Gold {
        question_id: item.question_id.clone(),
        message: e.to_string(),
    })?;
    let ordered = gold_program.has_top_level_order_by();
    let gold = db
        .backend
        .execute(&item.gold_sql, &eval_limits())
        .map_err(|e| EvalError::GoldExecution {
            question_id: item.question_id.clone(),
            message: e.message,
        })?;

    let mut outcome = EvalOutcome {
        question_id: item.question_id.clone(),
        difficulty: item.difficulty.clone(),
        strict_ex: 0,
        lenient_ex: 0,
        filter_precision: None,
        filter_recall: None,
        recall_at_k: None,
        note: None,
    };
    match run.final_sql.as_deref().map(|sql| db.backend.execute(sql, &eval_limits())) {
        Some(Ok(predicted)) => {
            outcome.strict_ex = strict_match(&predicted, &gold, ordered);
            outcome.lenient_ex = lenient_match(&predicted, &gold, ordered);
        }
        Some(Err(e)) => outcome.note = Some(format!("prediction failed: {}", e.message)),
        None => outcome.note = Some("no final SQL".into()),
    }
    match filter_quality(&run.filtered_schema, &item.gold_sql, &db.schema, options.dialect) {
        Ok((p, r)) => {
            outcome.filter_precision = Some(p);
            outcome.filter_recall = Some(r);
        }
        Err(e) => log::warn!("{}: filter quality unavailable: {e}", item.question_id),
    }
    if options.k > 1 {
        let candidates: Vec<Option<ExecutionResult>> = run
            .candidates
            .iter()
            .take(options.k)
            .map(|c| db.backend.execute(&c.final_sql, &eval_limits()).ok())
            .collect();
        outcome.recall_at_k = Some(recall_at_k(&candidates, &gold, options.mode, ordered));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    /// Percent under the report's mode.
    pub ex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub k: usize,
    pub items: usize,
    /// Percent under `mode`; items without a run count as wrong.
    pub overall_ex: f64,
    pub strict_ex: f64,
    pub lenient_ex: f64,
    pub by_difficulty: BTreeMap<String, BucketStats>,
    #[serde(default)]
    pub recall_ex: Option<f64>,
    #[serde(default)]
    pub mean_filter_precision: Option<f64>,
    #[serde(default)]
    pub mean_filter_recall: Option<f64>,
    pub ledger: Vec<LedgerRow>,
    pub outcomes: Vec<EvalOutcome>,
    /// Items with no run-record.
    pub missing_runs: Vec<String>,
    /// Run-records with no manifest item.
    pub unjoined_runs: Vec<String>,
    /// Items that could not be scored, with the reason.
    pub errors: Vec<String>,
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Joins runs to items by question id and scores them.
pub fn evaluate(runs: &[PipelineRun], items: &[BenchmarkItem], databases: &BTreeMap<String, EvalDatabase>, options: &EvalOptions) -> EvalReport {
    let by_id: BTreeMap<&str, &PipelineRun> = runs.iter().map(|r| (r.question_id.as_str(), r)).collect();
    let item_ids: BTreeSet<&str> = items.iter().map(|i| i.question_id.as_str()).collect();
    let mut outcomes = Vec::new();
    let mut missing_runs = Vec::new();
    let mut errors = Vec::new();
    let mut ledger = UsageLedger::default();
    for item in items {
        let Some(run) = by_id.get(item.question_id.as_str()) else {
            missing_runs.push(item.question_id.clone());
            continue;
        };
        ledger.merge(&run.ledger);
        let scored = databases
            .get(&item.db_id)
            .ok_or_else(|| EvalError::UnknownDatabase(item.db_id.clone()))
            .and_then(|db| evaluate_item(run, item, db, options));
        match scored {
            Ok(o) => outcomes.push(o),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let unjoined_runs = runs
        .iter()
        .filter(|r| !item_ids.contains(r.question_id.as_str()))
        .map(|r| r.question_id.clone())
        .collect();
    build_report(outcomes, items, missing_runs, unjoined_runs, errors, &ledger, options)
}

pub fn build_report(
    outcomes: Vec<EvalOutcome>,
    items: &[BenchmarkItem],
    missing_runs: Vec<String>,
    unjoined_runs: Vec<String>,
    errors: Vec<String>,
    ledger: &UsageLedger,
    options: &EvalOptions,
) -> EvalReport {
    let n = items.len();
    let hit = |o: &EvalOutcome| match options.mode {
        MatchMode::Strict => o.strict_ex,
        MatchMode::Lenient => o.lenient_ex,
    } as usize;
    let labelled = items.iter().any(|i| i.difficulty.is_some());
    let label = |d: &Option<String>| match (labelled, d) {
        (false, _) => "all".to_string(),
        (true, Some(d)) => d.clone(),
        (true, None) => "unlabeled".to_string(),
    };
    let scored: BTreeMap<&str, &EvalOutcome> = outcomes.iter().map(|o| (o.question_id.as_str(), o)).collect();
    let mut buckets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in items {
        let b = buckets.entry(label(&item.difficulty)).or_default();
        b.0 += 1;
        b.1 += scored.get(item.question_id.as_str()).map_or(0, |o| hit(o));
    }
    EvalReport {
        mode: options.mode,
        k: options.k,
        items: n,
        overall_ex: percent(outcomes.iter().map(hit).sum(), n),
        strict_ex: percent(outcomes.iter().map(|o| o.strict_ex as usize).sum(), n),
        lenient_ex: percent(outcomes.iter().map(|o| o.lenient_ex as usize).sum(), n),
        by_difficulty: buckets
            .into_iter()
            .map(|(k, (count, hits))| (k, BucketStats { count, ex: percent(hits, count) }))
            .collect(),
        recall_ex: (options.k > 1).then(|| percent(outcomes.iter().filter_map(|o| o.recall_at_k).map(usize::from).sum(), n)),
        mean_filter_precision: mean(outcomes.iter().filter_map(|o| o.filter_precision)),
        mean_filter_recall: mean(outcomes.iter().filter_map(|o| o.filter_recall)),
        ledger: ledger.rows(),
        outcomes,
        missing_runs,
        unjoined_runs,
        errors,
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            MatchMode::Strict => "strict",
            MatchMode::Lenient => "lenient",
        };
        let mut out = String::new();
        out.push_str(&format!("{:<28}{:>10}\n", "metric", "value"));
        out.push_str(&format!("{:<28}{:>10}\n", "items", self.items));
        out.push_str(&format!("{:<28}{:>10.2}\n", format!("EX ({mode})"), self.overall_ex));
        out.push_str(&format!("{:<28}{:>10.2}\n", "EX strict", self.strict_ex));
        out.push_str(&format!("{:<28}{:>10.2}\n", "EX lenient", self.lenient_ex));
        if let Some(r) = self.recall_ex {
            out.push_str(&format!("{:<28}{:>10.2}\n", format!("recall EX @{}", self.k), r));
        }
        if let Some(p) = self.mean_filter_precision {
            out.push_str(&format!("{:<28}{:>10.2}\n", "filter precision", 100.0 * p));
        }
        if let Some(r) = self.mean_filter_recall {
            out.push_str(&format!("{:<28}{:>10.2}\n", "filter recall", 100.0 * r));
        }
        out.push('\n');
        out.push_str(&format!("{:<16}{:>8}{:>10}\n", "difficulty", "count", "EX"));
        for (k, b) in &self.by_difficulty {
            out.push_str(&format!("{:<16}{:>8}{:>10.2}\n", k, b.count, b.ex));
        }
        if !self.ledger.is_empty() {
            out.push('\n');
            out.push_str(&format!("{:<16}{:>8}{:>12}{:>10}{:>10}\n", "agent", "calls", "tokens", "token%", "time%"));
            for row in &self.ledger {
                out.push_str(&format!(
                    "{:<16}{:>8}{:>12}{:>10.2}{:>10.2}\n",
                    row.agent_role.as_str(),
                    row.usage.calls,
                    row.usage.tokens(),
                    row.token_pct,
                    row.wall_pct
                ));
            }
        }
        for (title, list) in [
            ("missing run-records", &self.missing_runs),
            ("run-records without an item", &self.unjoined_runs),
            ("errors", &self.errors),
        ] {
            if !list.is_empty() {
                out.push_str(&format!("\n{title}:\n"));
                for id in list {
                    out.push_str(&format!("  {id}\n"));
                }
            }
        }
        out
    }
}
