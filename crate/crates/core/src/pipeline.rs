//! The three-stage pipeline: question rewriting, per-chunk view generation
//! with validation and repair, then planning, SQL generation and revision.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    AgentError, AgentSuite, AgentView, ChunkLookup, QueryPlan, Revision, RewrittenQuestion, SelectionRecord,
    ViewFeedback, ViewReply, SAMPLE_ROWS,
};
use crate::catalog::{serialize_tables, DetailLevel, TableDef};
use crate::compress::CompressedCatalog;
use crate::exec::{ExecLimits, ExecutionBackend, ExecutionError, ExecutionResult};
use crate::llm::{GatewayError, UsageLedger};
use crate::split::{SchemaChunk, SchemaPartition};
use crate::sql::{extract_literals, extract_references, parse, ReferenceSet};
use crate::values::{EmbeddingProvider, RetrievalCandidate, RetrieveOptions, ValueIndex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("gateway failure during {stage}: {source}")]
    Gateway { stage: Stage, source: GatewayError },
    #[error("agent failure during {stage}: {message}")]
    Agent { stage: Stage, message: String },
    #[error("{0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Rewrite,
    ViewGeneration,
    SqlGeneration,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Preprocess => "preprocess",
            Stage::Rewrite => "rewrite",
            Stage::ViewGeneration => "view_generation",
            Stage::SqlGeneration => "sql_generation",
        })
    }
}

fn agent_failure(stage: Stage, e: AgentError) -> PipelineError {
    match e {
        AgentError::Gateway(source) => PipelineError::Gateway { stage, source },
        other => PipelineError::Agent { stage, message: other.to_string() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub t_max: usize,
    pub retrieve: RetrieveOptions,
    pub exec_limits: ExecLimits,
    /// Worker threads for view generation.
    pub parallelism: usize,
    /// Process chunks one after another in order. No state crosses chunks
    /// either way.
    pub sequential: bool,
    pub k_candidates: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_max: 5,
            retrieve: RetrieveOptions::default(),
            exec_limits: ExecLimits::default(),
            parallelism: 4,
            sequential: false,
            k_candidates: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Consistency

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: u8,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub consistent: bool,
    pub violations: Vec<Violation>,
}

impl ConsistencyVerdict {
    pub fn message(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("rule {}: {}", v.rule, v.detail))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn contains_ci(set: &BTreeSet<String>, item: &str) -> bool {
    set.iter().any(|s| s.eq_ignore_ascii_case(item))
}

/// Checks a view against its selection.
///
/// 1. An empty selection admits no view.
/// 2. A non-empty view needs at least one selected column.
/// 3. Every table and column the view reads must be selected.
///
/// Selected elements the view does not use never count against it.
pub fn check_consistency(view: Option<&AgentView>, selection: &SelectionRecord, references: &ReferenceSet) -> ConsistencyVerdict {
    let mut violations = Vec::new();
    let has_view = view.is_some_and(|v| !v.ctes.is_empty());
    if has_view && selection.is_empty() {
        violations.push(Violation {
            rule: 1,
            detail: "the selection is empty, so no view may be generated".into(),
        });
    }
    if has_view && selection.columns.is_empty() {
        violations.push(Violation {
            rule: 2,
            detail: "the view is not empty but the selection lists no columns".into(),
        });
    }
    for t in &references.tables {
        if !contains_ci(&selection.tables, t) {
            violations.push(Violation {
                rule: 3,
                detail: format!("table {t} is used by the view but missing from the selection"),
            });
        }
    }
    for c in &references.columns {
        if !contains_ci(&selection.columns, c) {
            violations.push(Violation {
                rule: 3,
                detail: format!("column {c} is used by the view but missing from the selection"),
            });
        }
    }
    ConsistencyVerdict {
        consistent: violations.is_empty(),
        violations,
    }
}

// ---------------------------------------------------------------------------
// View generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkStatus {
    Accepted,
    RejectedAfterTmax,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkAttempt {
    pub iteration: usize,
    #[serde(default)]
    pub reply_problem: Option<String>,
    #[serde(default)]
    pub execution_error: Option<String>,
    #[serde(default)]
    pub consistency: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkOutcome {
    pub chunk_index: usize,
    pub status: ChunkStatus,
    pub view: Option<AgentView>,
    pub selection: Option<SelectionRecord>,
    pub iterations_used: usize,
    pub retrieved_values: Vec<RetrievalCandidate>,
    pub attempts: Vec<ChunkAttempt>,
    /// References of the accepted view.
    #[serde(default)]
    pub references: Option<ReferenceSet>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredSchema {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<String>,
    /// Element name to the chunks that selected it.
    pub source: BTreeMap<String, BTreeSet<usize>>,
}

impl FilteredSchema {
    /// Union of the selections of accepted and irrelevant chunks.
    pub fn aggregate(outcomes: &[ChunkOutcome]) -> Self {
        let mut f = FilteredSchema::default();
        for o in outcomes {
            if o.status == ChunkStatus::RejectedAfterTmax {
                continue;
            }
            let Some(sel) = &o.selection else { continue };
            for t in &sel.tables {
                f.tables.insert(t.clone());
                f.source.entry(t.clone()).or_default().insert(o.chunk_index);
            }
            for c in &sel.columns {
                f.columns.insert(c.clone());
                f.source.entry(c.clone()).or_default().insert(o.chunk_index);
            }
        }
        f
    }

    /// Whether `refs` lies inside this schema.
    pub fn covers(&self, refs: &ReferenceSet) -> bool {
        refs.tables.iter().all(|t| contains_ci(&self.tables, t)) && refs.columns.iter().all(|c| contains_ci(&self.columns, c))
    }

    /// The selected tables, each with its selected columns, in catalog order.
    pub fn render(&self, schema: &CompressedCatalog) -> String {
        let tables: Vec<TableDef> = schema
            .catalog
            .tables
            .iter()
            .filter(|t| self.tables.contains(&t.name))
            .map(|t| {
                let mut t = t.clone();
                t.columns.retain(|c| self.columns.contains(&format!("{}.{}", t.name, c.name)));
                t.sample_rows = None;
                t
            })
            .collect();
        let relations = schema.catalog.relations_within(&tables);
        serialize_tables(&tables, &relations, DetailLevel::Full)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGeneration {
    pub views: Vec<AgentView>,
    pub filtered_schema: FilteredSchema,
    pub chunk_outcomes: Vec<ChunkOutcome>,
}

/// A view-generation abort with the chunks finished before it.
#[derive(Debug)]
pub struct ViewGenerationError {
    pub error: PipelineError,
    pub partial: Vec<ChunkOutcome>,
}

pub struct ViewContext<'a> {
    pub suite: &'a AgentSuite,
    pub schema: &'a CompressedCatalog,
    pub backend: &'a dyn ExecutionBackend,
    pub index: Option<&'a ValueIndex>,
    pub embedder: &'a dyn EmbeddingProvider,
    pub config: &'a PipelineConfig,
}

fn retrieval_literal(lit: &str) -> &str {
    lit.trim_matches(|c| c == '%' || c == '_').trim()
}

struct Evaluation {
    valid: bool,
    attempt: ChunkAttempt,
    sample: Option<ExecutionResult>,
    references: Option<ReferenceSet>,
}

fn evaluate_reply(
    ctx: &ViewContext,
    iteration: usize,
    reply: &ViewReply,
    retrieved: &mut Vec<RetrievalCandidate>,
) -> Result<Evaluation, PipelineError> {
    let mut attempt = ChunkAttempt {
        iteration,
        reply_problem: None,
        execution_error: None,
        consistency: Vec::new(),
    };
    let dialect = ctx.suite.dialect;
    let program_text = reply.view.as_ref().map(AgentView::program_text);
    let program = program_text.as_deref().map(|t| parse(t, dialect));

    if let (Some(Ok(program)), Some(index)) = (&program, ctx.index) {
        for lit in extract_literals(program) {
            let found = index
                .retrieve(retrieval_literal(&lit), &ctx.config.retrieve, ctx.embedder)
                .map_err(|e| PipelineError::Artifact(format!("value retrieval failed: {e}")))?;
            for c in found {
                let dup = retrieved.iter().any(|r| {
                    r.entry.table == c.entry.table && r.entry.column == c.entry.column && r.entry.value == c.entry.value
                });
                if !dup {
                    retrieved.push(c);
                }
            }
        }
    }

    let mut sample = None;
    if let Some(text) = &program_text {
        match ctx.backend.execute(text, &ctx.config.exec_limits) {
            Ok(r) => sample = Some(r.head(SAMPLE_ROWS)),
            Err(e) => attempt.execution_error = Some(e.message),
        }
    }

    let mut references = None;
    match &program {
        Some(Ok(p)) => match extract_references(p, ctx.schema) {
            Ok(r) => references = Some(r),
            Err(e) => attempt.consistency.push(e.to_string()),
        },
        Some(Err(e)) if attempt.execution_error.is_none() => attempt.execution_error = Some(e.to_string()),
        _ => {}
    }
    let refs = references.clone().unwrap_or_default();
    let verdict = check_consistency(reply.view.as_ref(), &reply.selection, &refs);
    attempt.consistency.extend(verdict.violations.iter().map(|v| format!("rule {}: {}", v.rule, v.detail)));
    attempt.consistency.extend(reply.selection_errors.iter().cloned());

    let valid = attempt.execution_error.is_none()
        && attempt.consistency.is_empty()
        && (reply.view.is_none() || references.is_some());
    Ok(Evaluation {
        valid,
        attempt,
        sample,
        references,
    })
}

/// Generation, validation and repair for one chunk.
pub fn process_chunk(ctx: &ViewContext, question: &RewrittenQuestion, chunk: &SchemaChunk) -> Result<ChunkOutcome, PipelineError> {
    let schema_text = chunk.serialize(DetailLevel::Full);
    let lookup = ChunkLookup {
        tables: &chunk.tables,
        schema: ctx.schema,
    };
    let t_max = ctx.config.t_max.max(1);
    let mut retrieved: Vec<RetrievalCandidate> = Vec::new();
    let mut attempts = Vec::new();
    let mut feedback = ViewFeedback::default();
    for iteration in 1..=t_max {
        let reply = ctx
            .suite
            .generate_view(question, chunk.index, &schema_text, &lookup, &feedback);
        let (eval, raw) = match reply {
            Ok(reply) => {
                let eval = evaluate_reply(ctx, iteration, &reply, &mut retrieved)?;
                if eval.valid {
                    attempts.push(eval.attempt);
                    let status = if reply.view.is_none() && reply.selection.is_empty() {
                        ChunkStatus::Irrelevant
                    } else {
                        ChunkStatus::Accepted
                    };
                    let view = reply.view.map(|mut v| {
                        v.sample_result = eval.sample;
                        v
                    });
                    return Ok(ChunkOutcome {
                        chunk_index: chunk.index,
                        status,
                        view,
                        selection: Some(reply.selection),
                        iterations_used: iteration,
                        retrieved_values: retrieved,
                        attempts,
                        references: eval.references,
                    });
                }
                (eval.attempt, reply.raw)
            }
            Err(AgentError::Unparseable { problem, reply }) => (
                ChunkAttempt {
                    iteration,
                    reply_problem: Some(problem),
                    execution_error: None,
                    consistency: Vec::new(),
                },
                reply,
            ),
            Err(e) => return Err(agent_failure(Stage::ViewGeneration, e)),
        };
        let mut consistency: Vec<String> = eval.consistency.clone();
        if let Some(p) = &eval.reply_problem {
            consistency.insert(0, format!("the reply could not be read: {p}"));
        }
        feedback = ViewFeedback {
            prior_reply: Some(raw),
            execution_error: eval.execution_error.clone(),
            consistency_message: (!consistency.is_empty()).then(|| consistency.join("\n")),
            retrieved_values: retrieved.clone(),
        };
        attempts.push(eval);
    }
    Ok(ChunkOutcome {
        chunk_index: chunk.index,
        status: ChunkStatus::RejectedAfterTmax,
        view: None,
        selection: None,
        iterations_used: t_max,
        retrieved_values: retrieved,
        attempts,
        references: None,
    })
}

/// Runs every chunk and aggregates the accepted views and selections.
pub fn run_view_generation(
    ctx: &ViewContext,
    question: &RewrittenQuestion,
    partition: &SchemaPartition,
) -> Result<ViewGeneration, ViewGenerationError> {
    let chunks = &partition.chunks;
    let results: Mutex<Vec<(usize, Result<ChunkOutcome, PipelineError>, UsageLedger)>> = Mutex::new(Vec::new());
    let run_one = |i: usize| {
        let suite = AgentSuite {
            gateway: ctx.suite.gateway.fork(),
            ..ctx.suite.clone()
        };
        let local = ViewContext {
            suite: &suite,
            schema: ctx.schema,
            backend: ctx.backend,
            index: ctx.index,
            embedder: ctx.embedder,
            config: ctx.config,
        };
        let outcome = process_chunk(&local, question, &chunks[i]);
        let failed = outcome.is_err();
        results.lock().expect("results lock").push((i, outcome, suite.gateway.ledger_report()));
        failed
    };

    let workers = if ctx.config.sequential { 1 } else { ctx.config.parallelism.clamp(1, chunks.len().max(1)) };
    if workers == 1 {
        for i in 0..chunks.len() {
            if run_one(i) {
                break;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let abort = std::sync::atomic::AtomicBool::new(false);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    if run_one(i) {
                        abort.store(true, Ordering::SeqCst);
                    }
                });
            }
        });
    }

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|r| r.0);
    let mut outcomes = Vec::new();
    let mut first_error = None;
    for (_, outcome, ledger) in results {
        ctx.suite.gateway.absorb(&ledger);
        match outcome {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(error) = first_error {
        return Err(ViewGenerationError { error, partial: outcomes });
    }

    let views: Vec<AgentView> = outcomes
        .iter()
        .filter(|o| o.status == ChunkStatus::Accepted)
        .filter_map(|o| o.view.clone())
        .collect();
    let filtered_schema = FilteredSchema::aggregate(&outcomes);
    for o in outcomes.iter().filter(|o| o.status == ChunkStatus::Accepted) {
        if let Some(r) = &o.references {
            debug_assert!(filtered_schema.covers(r), "accepted view escapes the filtered schema");
        }
    }
    Ok(ViewGeneration {
        views,
        filtered_schema,
        chunk_outcomes: outcomes,
    })
}

// ---------------------------------------------------------------------------
// SQL generation

/// One executed (or, for the last repair, unexecuted) query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlIteration {
    pub sql: String,
    /// `None` when the loop ended before this query was executed.
    pub outcome: Option<ExecRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecRecord {
    Result(ExecutionResult),
    Error(ExecutionError),
}

impl ExecRecord {
    pub fn from_outcome(o: Result<ExecutionResult, ExecutionError>) -> Self {
        match o {
            Ok(r) => ExecRecord::Result(r),
            Err(e) => ExecRecord::Error(e),
        }
    }

    pub fn result(&self) -> Option<&ExecutionResult> {
        match self {
            ExecRecord::Result(r) => Some(r),
            ExecRecord::Error(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRun {
    pub sql_iterations: Vec<SqlIteration>,
    pub revision: Revision,
    pub final_sql: String,
    pub final_outcome: ExecRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlGeneration {
    pub plan: QueryPlan,
    pub candidates: Vec<CandidateRun>,
    /// Index into `candidates` of the reported answer.
    pub chosen: usize,
}

impl SqlGeneration {
    pub fn chosen(&self) -> &CandidateRun {
        &self.candidates[self.chosen]
    }
}

#[allow(clippy::too_many_arguments)]
fn repair_and_revise(
    suite: &AgentSuite,
    backend: &dyn ExecutionBackend,
    config: &PipelineConfig,
    question: &RewrittenQuestion,
    plan: &QueryPlan,
    views: &[AgentView],
    schema_text: &str,
    first: String,
) -> Result<CandidateRun, PipelineError> {
    let stage = Stage::SqlGeneration;
    let t_max = config.t_max.max(1);
    let mut iterations = Vec::new();
    let mut sql = first;
    let mut sample = None;
    let mut executed_last = false;
    for t in 0..t_max {
        let outcome = backend.execute(&sql, &config.exec_limits);
        match outcome {
            Ok(r) => {
                sample = Some(r.head(SAMPLE_ROWS));
                iterations.push(SqlIteration { sql: sql.clone(), outcome: Some(ExecRecord::Result(r)) });
                executed_last = true;
                break;
            }
            Err(e) => {
                iterations.push(SqlIteration { sql: sql.clone(), outcome: Some(ExecRecord::Error(e.clone())) });
                let next = suite
                    .generate_sql(plan, question, views, schema_text, Some(&sql), Some(&e.message))
                    .map_err(|e| agent_failure(stage, e));
                sql = match next {
                    Ok(s) => s,
                    Err(PipelineError::Agent { message, .. }) => {
                        log::warn!("repair {t} produced no SQL: {message}");
                        sql
                    }
                    Err(e) => return Err(e),
                };
                executed_last = false;
            }
        }
    }
    if !executed_last {
        iterations.push(SqlIteration { sql: sql.clone(), outcome: None });
    }
    let revision = suite
        .revise_sql(question, &sql, sample.as_ref())
        .map_err(|e| agent_failure(stage, e))?;
    let final_outcome = ExecRecord::from_outcome(backend.execute(&revision.sql, &config.exec_limits));
    Ok(CandidateRun {
        sql_iterations: iterations,
        final_sql: revision.sql.clone(),
        revision,
        final_outcome,
    })
}

/// Plans once, then runs each candidate through its own execute/repair
/// loop and a final revision.
pub fn run_sql_generation(
    suite: &AgentSuite,
    backend: &dyn ExecutionBackend,
    config: &PipelineConfig,
    question: &RewrittenQuestion,
    views: &[AgentView],
    schema_text: &str,
) -> Result<SqlGeneration, PipelineError> {
    let stage = Stage::SqlGeneration;
    let plan = suite.plan_query(question, views, schema_text).map_err(|e| agent_failure(stage, e))?;
    let k = config.k_candidates.max(1);
    let first = if k == 1 {
        vec![suite
            .generate_sql(&plan, question, views, schema_text, None, None)
            .map_err(|e| agent_failure(stage, e))?]
    } else {
        suite
            .generate_sql_candidates(&plan, question, views, schema_text, k)
            .map_err(|e| agent_failure(stage, e))?
    };
    let mut candidates = Vec::new();
    for sql in first {
        candidates.push(repair_and_revise(suite, backend, config, question, &plan, views, schema_text, sql)?);
    }
    let chosen = candidates
        .iter()
        .position(|c| matches!(c.final_outcome, ExecRecord::Result(_)))
        .unwrap_or(0);
    Ok(SqlGeneration { plan, candidates, chosen })
}

// ---------------------------------------------------------------------------
// Whole runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Succeeded,
    FailedExecution,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub question_id: String,
    pub db_id: String,
    pub status: RunStatus,
    /// Stage that failed, for failed runs.
    #[serde(default)]
    pub failed_stage: Option<Stage>,
    #[serde(default)]
    pub error: Option<String>,
    pub rewritten: Option<RewrittenQuestion>,
    pub chunk_outcomes: Vec<ChunkOutcome>,
    pub aggregated_views: Vec<AgentView>,
    pub filtered_schema: FilteredSchema,
    pub plan: Option<QueryPlan>,
    pub sql_iterations: Vec<SqlIteration>,
    pub candidates: Vec<CandidateRun>,
    pub final_sql: Option<String>,
    pub final_result: Option<ExecutionResult>,
    pub ledger: UsageLedger,
}

pub struct RunInputs<'a> {
    pub question_id: &'a str,
    pub question: &'a str,
    pub knowledge: &'a str,
    pub schema: &'a CompressedCatalog,
    pub partition: &'a SchemaPartition,
    pub index: Option<&'a ValueIndex>,
}

/// Rewrite, view generation and SQL generation for one question. Failures
/// are recorded in the returned run rather than raised.
pub fn run_pipeline(
    suite: &AgentSuite,
    backend: &dyn ExecutionBackend,
    embedder: &dyn EmbeddingProvider,
    config: &PipelineConfig,
    inputs: &RunInputs,
) -> PipelineRun {
    let mut run = PipelineRun {
        question_id: inputs.question_id.to_string(),
        db_id: inputs.schema.catalog.db_id.clone(),
        status: RunStatus::Failed,
        failed_stage: None,
        error: None,
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
    };
    let fail = |run: &mut PipelineRun, stage: Stage, e: PipelineError| {
        log::error!("{}: {e}", run.question_id);
        run.status = RunStatus::Failed;
        run.failed_stage = Some(stage);
        run.error = Some(e.to_string());
        run.ledger = suite.gateway.ledger_report();
    };

    let rewritten = match suite.rewrite_question(inputs.question, inputs.knowledge) {
        Ok(r) => r,
        Err(e) => {
            fail(&mut run, Stage::Rewrite, agent_failure(Stage::Rewrite, e));
            return run;
        }
    };
    run.rewritten = Some(rewritten.clone());

    let ctx = ViewContext {
        suite,
        schema: inputs.schema,
        backend,
        index: inputs.index,
        embedder,
        config,
    };
    let generation = match run_view_generation(&ctx, &rewritten, inputs.partition) {
        Ok(g) => g,
        Err(ViewGenerationError { error, partial }) => {
            run.chunk_outcomes = partial;
            fail(&mut run, Stage::ViewGeneration, error);
            return run;
        }
    };
    run.chunk_outcomes = generation.chunk_outcomes;
    run.aggregated_views = generation.views;
    run.filtered_schema = generation.filtered_schema;

    let schema_text = run.filtered_schema.render(inputs.schema);
    match run_sql_generation(suite, backend, config, &rewritten, &run.aggregated_views, &schema_text) {
        Ok(g) => {
            let chosen = g.chosen().clone();
            run.plan = Some(g.plan);
            run.sql_iterations = chosen.sql_iterations.clone();
            run.final_sql = Some(chosen.final_sql.clone());
            run.final_result = chosen.final_outcome.result().cloned();
            run.status = if run.final_result.is_some() { RunStatus::Succeeded } else { RunStatus::FailedExecution };
            run.candidates = g.candidates;
        }
        Err(e) => {
            fail(&mut run, Stage::SqlGeneration, e);
            return run;
        }
    }
    run.ledger = suite.gateway.ledger_report();
    run
}
