//! Prompt construction and reply parsing for the five pipeline agents.
//!
//! # Reply envelope
//!
//! Agents answer in prose with fenced blocks. The parsers look only at the
//! blocks and at a few labeled lines:
//!
//! - rewriter: lines starting `TASK:`, `REQUIRED OUTPUTS:`, `FILTERS:` and
//!   `SORTING/LIMIT:`; list items follow their label, one per line.
//! - view generator: one ```` ```sql ```` block per CTE written as
//!   `name AS (SELECT ...)` (a leading `WITH` and a trailing main query are
//!   tolerated), and one ```` ```json ```` block
//!   `{"tables": [...], "columns": ["t.c", ...]}`. Prose outside the blocks
//!   is the rationale.
//! - planner: one ```` ```json ```` block with `steps`, `ctes_to_use`,
//!   `tables_to_use`, `output_columns` and `notes`.
//! - SQL generator: the last ```` ```sql ```` block (or the first `k` blocks
//!   when several candidates are requested).
//! - revisor: a `VERDICT: CORRECT` or `VERDICT: REVISED` line, the latter
//!   followed by a ```` ```sql ```` block.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{estimate_tokens, TableDef};
use crate::exec::{ExecutionResult, MAX_ERROR_CHARS};
use crate::llm::{AgentRole, ChatMessage, GatewayError, LlmGateway};
use crate::sql::{parse, SchemaLookup, SqlDialect};
use crate::values::RetrievalCandidate;

pub const TEMPLATE_VERSION: &str = "v1";
pub const SAMPLE_ROWS: usize = 10;

const TEMPLATE_NAMES: [&str; 11] = [
    "rewriter.system",
    "rewriter.user",
    "view_generator.system",
    "view_generator.user",
    "planner.system",
    "planner.user",
    "sql_generator.system",
    "sql_generator.user",
    "revisor.system",
    "revisor.user",
    "reformat",
];

const BUILTIN: [&str; 11] = [
    include_str!("../templates/rewriter.system.txt"),
    include_str!("../templates/rewriter.user.txt"),
    include_str!("../templates/view_generator.system.txt"),
    include_str!("../templates/view_generator.user.txt"),
    include_str!("../templates/planner.system.txt"),
    include_str!("../templates/planner.user.txt"),
    include_str!("../templates/sql_generator.system.txt"),
    include_str!("../templates/sql_generator.user.txt"),
    include_str!("../templates/revisor.system.txt"),
    include_str!("../templates/revisor.user.txt"),
    include_str!("../templates/reformat.txt"),
];

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    /// The reply stayed unreadable after the reformat retry.
    #[error("unparseable reply: {problem}")]
    Unparseable { problem: String, reply: String },
    #[error("template error: {0}")]
    Template(String),
}

impl AgentError {
    pub fn is_repairable(&self) -> bool {
        matches!(self, AgentError::Unparseable { .. })
    }
}

/// Named prompt templates with `{{placeholder}}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    name: String,
    texts: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            name: format!("builtin-{TEMPLATE_VERSION}"),
            texts: TEMPLATE_NAMES
                .iter()
                .zip(BUILTIN)
                .map(|(n, t)| (n.to_string(), t.to_string()))
                .collect(),
        }
    }

    /// Loads `<name>.txt` files from `dir`; missing files keep the built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self, AgentError> {
        if !dir.is_dir() {
            return Err(AgentError::Template(format!("{} is not a directory", dir.display())));
        }
        let mut t = Self::builtin();
        t.name = dir.display().to_string();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| AgentError::Template(format!("{}: {e}", path.display())))?;
                t.texts.insert(name.to_string(), text);
            }
        }
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 over all template texts, for run-records.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.texts {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    /// Fills `{{slot}}` placeholders. A line holding only a slot that
    /// renders empty is dropped.
    pub fn render(&self, name: &str, slots: &[(&str, &str)]) -> String {
        let text = self.texts.get(name).map(String::as_str).unwrap_or("");
        let mut out = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim();
            let lone = slots
                .iter()
                .find(|(k, _)| trimmed == format!("{{{{{k}}}}}"));
            if let Some((_, v)) = lone {
                if v.trim().is_empty() {
                    continue;
                }
            }
            let mut l = line.to_string();
            for (k, v) in slots {
                l = l.replace(&format!("{{{{{k}}}}}"), v);
            }
            out.push(l);
        }
        out.join("\n").trim_end().to_string()
    }
}

// ---------------------------------------------------------------------------
// Fenced blocks

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```").expect("static regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    lang: String,
    body: String,
    start: usize,
    end: usize,
}

fn blocks(reply: &str) -> Vec<Block> {
    FENCE
        .captures_iter(reply)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            Block {
                lang: c[1].to_ascii_lowercase(),
                body: c[2].trim().to_string(),
                start: m.start(),
                end: m.end(),
            }
        })
        .collect()
}

fn looks_like_sql(body: &str) -> bool {
    let head = body.trim_start().to_ascii_uppercase();
    ["SELECT", "WITH", "("].iter().any(|k| head.starts_with(k))
        || Regex::new(r"(?i)^[\w{}$]+\s*(\([^)]*\))?\s+AS\s*\(").expect("static regex").is_match(body.trim_start())
}

fn sql_blocks(reply: &str) -> Vec<Block> {
    blocks(reply)
        .into_iter()
        .filter(|b| b.lang == "sql" || (b.lang.is_empty() && looks_like_sql(&b.body)))
        .collect()
}

fn json_blocks(reply: &str) -> Vec<Block> {
    blocks(reply)
        .into_iter()
        .filter(|b| b.lang == "json" || (b.lang.is_empty() && b.body.trim_start().starts_with('{')))
        .collect()
}

fn truncate_chars(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        text.to_string()
    } else {
        let mut t: String = text.chars().take(max).collect();
        t.push_str(" [truncated]");
        t
    }
}

/// Shrinks `block` so that `fixed_tokens` plus the block fit in `limit`.
fn clip_to_budget(block: String, fixed_tokens: usize, limit: Option<usize>) -> String {
    let Some(limit) = limit else { return block };
    let room = limit.saturating_sub(fixed_tokens + 8);
    if estimate_tokens(&block) <= room {
        return block;
    }
    log::warn!("prompt section clipped to {room} tokens");
    truncate_chars(&block, room * 4)
}

// ---------------------------------------------------------------------------
// Domain types

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuestion {
    pub task: String,
    pub required_outputs: Vec<String>,
    pub filters: Vec<String>,
    /// `"none"` when the question imposes no ordering or limit.
    pub sorting_limit: String,
    pub full_text: String,
    #[serde(default)]
    pub fallback: bool,
}

impl RewrittenQuestion {
    fn render(task: &str, outputs: &[String], filters: &[String], sorting: &str) -> String {
        let list = |items: &[String]| {
            if items.is_empty() {
                " none".to_string()
            } else {
                items.iter().map(|i| format!("\n- {i}")).collect()
            }
        };
        format!(
            "TASK: {task}\nREQUIRED OUTPUTS:{}\nFILTERS:{}\nSORTING/LIMIT: {sorting}",
            list(outputs),
            list(filters)
        )
    }

    pub fn fallback(question: &str, knowledge: &str) -> Self {
        let mut full_text = Self::render(question.trim(), &[], &[], "none");
        if !knowledge.trim().is_empty() {
            full_text.push_str("\nEXTERNAL KNOWLEDGE: ");
            full_text.push_str(knowledge);
        }
        Self {
            task: question.trim().to_string(),
            required_outputs: Vec::new(),
            filters: Vec::new(),
            sorting_limit: "none".into(),
            full_text,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CteDef {
    pub name: String,
    /// Body text between the parentheses, as the agent wrote it.
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub chunk_index: usize,
    pub ctes: Vec<CteDef>,
    pub rationale: String,
    #[serde(default)]
    pub sample_result: Option<ExecutionResult>,
}

impl AgentView {
    pub fn with_clause(&self) -> String {
        let defs: Vec<String> = self.ctes.iter().map(|c| format!("{} AS (\n{}\n)", c.name, c.sql)).collect();
        format!("WITH {}", defs.join(",\n"))
    }

    /// The whole view as one query selecting from its last CTE.
    pub fn program_text(&self) -> String {
        let last = &self.ctes.last().expect("view has at least one CTE").name;
        format!("{}\nSELECT * FROM {last}", self.with_clause())
    }

    /// One CTE wrapped as `WITH name AS (...) SELECT * FROM name`.
    pub fn standalone_text(&self, i: usize) -> String {
        let c = &self.ctes[i];
        format!("WITH {} AS (\n{}\n)\nSELECT * FROM {}", c.name, c.sql, c.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub tables: BTreeSet<String>,
    /// Qualified `table.column` names.
    pub columns: BTreeSet<String>,
}

impl SelectionRecord {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.columns.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub steps: Vec<String>,
    #[serde(default)]
    pub ctes_to_use: Vec<String>,
    #[serde(default)]
    pub tables_to_use: Vec<String>,
    #[serde(default)]
    pub output_columns: Vec<String>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub degraded: bool,
}

impl QueryPlan {
    pub fn to_text(&self) -> String {
        let mut out: Vec<String> = self.steps.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
        let mut line = |label: &str, items: &[String]| {
            if !items.is_empty() {
                out.push(format!("{label}: {}", items.join(", ")));
            }
        };
        line("Views to use", &self.ctes_to_use);
        line("Tables to use", &self.tables_to_use);
        line("Output columns", &self.output_columns);
        if !self.notes.trim().is_empty() {
            out.push(format!("Notes: {}", self.notes.trim()));
        }
        out.join("\n")
    }
}

/// Regeneration context for a view-generator call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewFeedback {
    pub prior_reply: Option<String>,
    pub execution_error: Option<String>,
    pub consistency_message: Option<String>,
    pub retrieved_values: Vec<RetrievalCandidate>,
}

impl ViewFeedback {
    pub fn is_empty(&self) -> bool {
        self.prior_reply.is_none()
            && self.execution_error.is_none()
            && self.consistency_message.is_none()
            && self.retrieved_values.is_empty()
    }
}

/// A parsed view-generator reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReply {
    pub view: Option<AgentView>,
    pub selection: SelectionRecord,
    /// Selection entries that name nothing in the chunk.
    pub selection_errors: Vec<String>,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionVerdict {
    Correct,
    Revised,
    /// The revisor's reply was unusable; the input SQL was kept.
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub sql: String,
    pub verdict: RevisionVerdict,
    #[serde(default)]
    pub note: Option<String>,
}

/// A view of one chunk's tables for resolving selection names.
pub struct ChunkLookup<'a> {
    pub tables: &'a [TableDef],
    /// Resolves compressed member names to chunk tables.
    pub schema: &'a dyn SchemaLookup,
}

impl SchemaLookup for ChunkLookup<'_> {
    fn resolve_table(&self, name: &str) -> Option<String> {
        let direct = self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name));
        if let Some(t) = direct {
            return Some(t.name.clone());
        }
        let canonical = self.schema.resolve_table(name)?;
        self.tables.iter().find(|t| t.name == canonical).map(|t| t.name.clone())
    }

    fn resolve_column(&self, table: &str, column: &str) -> Option<String> {
        let table = self.resolve_table(table)?;
        self.schema.resolve_column(&table, column).or_else(|| {
            let def = self.tables.iter().find(|t| t.name == table)?;
            def.column(column).map(|c| c.name.clone())
        })
    }

    fn columns_of(&self, table: &str) -> Vec<String> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(table))
            .map(|t| t.columns.iter().map(|c| c.name.clone()).collect())
            .unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// Reply parsers

const REWRITE_LABELS: [&str; 4] = ["TASK", "REQUIRED OUTPUTS", "FILTERS", "SORTING/LIMIT"];

fn is_none_marker(s: &str) -> bool {
    let t = s.trim().trim_end_matches('.').to_ascii_lowercase();
    t.is_empty() || t == "none" || t == "n/a" || t == "-"
}

fn list_items(text: &str) -> Vec<String> {
    static BULLET: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s*").expect("static regex"));
    text.lines()
        .map(|l| BULLET.replace(l, "").trim().to_string())
        .filter(|l| !is_none_marker(l))
        .collect()
}

pub fn parse_rewrite(reply: &str) -> Result<RewrittenQuestion, String> {
    static LABEL: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?im)^[ \t#*]*(TASK|REQUIRED OUTPUTS|FILTERS(?:/CONSTRAINTS)?|SORTING/LIMIT)[*]*[ \t]*:").expect("static regex")
    });
    let mut found: Vec<(usize, usize, String)> = LABEL
        .captures_iter(reply)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            let label = c[1].to_ascii_uppercase();
            let label = if label.starts_with("FILTERS") { "FILTERS".to_string() } else { label };
            (m.start(), m.end(), label)
        })
        .collect();
    found.sort_by_key(|f| f.0);
    let mut sections: BTreeMap<String, String> = BTreeMap::new();
    for (i, (_, end, label)) in found.iter().enumerate() {
        let stop = found.get(i + 1).map_or(reply.len(), |n| n.0);
        sections.entry(label.clone()).or_insert_with(|| reply[*end..stop].trim().to_string());
    }
    let missing: Vec<&str> = REWRITE_LABELS.iter().copied().filter(|l| !sections.contains_key(*l)).collect();
    if !missing.is_empty() {
        return Err(format!("missing section(s) {}", missing.join(", ")));
    }
    let task = sections["TASK"].lines().map(str::trim).collect::<Vec<_>>().join(" ").trim().to_string();
    if is_none_marker(&task) {
        return Err("TASK section is empty".into());
    }
    let required_outputs = list_items(&sections["REQUIRED OUTPUTS"]);
    let filters = list_items(&sections["FILTERS"]);
    let sorting = sections["SORTING/LIMIT"].lines().map(str::trim).collect::<Vec<_>>().join(" ");
    let sorting_limit = if is_none_marker(&sorting) { "none".to_string() } else { sorting };
    Ok(RewrittenQuestion {
        full_text: RewrittenQuestion::render(&task, &required_outputs, &filters, &sorting_limit),
        task,
        required_outputs,
        filters,
        sorting_limit,
        fallback: false,
    })
}

/// Byte offset just past the parenthesized group opening at `open`,
/// honouring quotes and comments.
fn matching_paren(text: &str, open: usize) -> Option<usize> {
    let b = text.as_bytes();
    debug_assert_eq!(b[open], b'(');
    let mut depth = 0usize;
    let mut i = open;
    while i < b.len() {
        match b[i] {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            q @ (b'\'' | b'"' | b'`') => {
                i += 1;
                while i < b.len() {
                    if b[i] == q {
                        if b.get(i + 1) == Some(&q) {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    i += 1;
                }
            }
            b'[' => {
                while i < b.len() && b[i] != b']' {
                    i += 1;
                }
            }
            b'-' if b.get(i + 1) == Some(&b'-') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < b.len() && !(b[i] == b'*' && b[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            _ => {}
        }
        i += 1;
    }
    None
}

fn skip_space_and_comments(text: &str, mut i: usize) -> usize {
    let b = text.as_bytes();
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if text[i..].starts_with("--") {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if text[i..].starts_with("/*") {
            i = text[i..].find("*/").map_or(b.len(), |p| i + p + 2);
        } else {
            return i;
        }
    }
}

fn keyword_at(text: &str, i: usize, kw: &str) -> bool {
    let rest = &text[i..];
    rest.len() >= kw.len()
        && rest[..kw.len()].eq_ignore_ascii_case(kw)
        && rest[kw.len()..].chars().next().is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
}

/// Splits one SQL block into CTE definitions. Returns `None` when the block
/// does not start with a `name AS (` definition.
pub fn split_cte_definitions(block: &str) -> Option<Result<Vec<CteDef>, String>> {
    static IDENT: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r#"^(?:"([^"]+)"|`([^`]+)`|\[([^\]]+)\]|([A-Za-z_][\w${}]*))"#).expect("static regex")
    });
    let text = block.trim().trim_end_matches(';');
    let mut i = skip_space_and_comments(text, 0);
    if keyword_at(text, i, "WITH") {
        i = skip_space_and_comments(text, i + 4);
        if keyword_at(text, i, "RECURSIVE") {
            i = skip_space_and_comments(text, i + 9);
        }
    }
    let mut defs = Vec::new();
    loop {
        let Some(c) = IDENT.captures(&text[i..]) else { break };
        let whole = c.get(0).expect("whole match");
        let raw_name = whole.as_str();
        let name = raw_name.to_string();
        let mut j = skip_space_and_comments(text, i + whole.end());
        let mut column_list = String::new();
        if text[j..].starts_with('(') {
            let Some(end) = matching_paren(text, j) else {
                return Some(Err(format!("unbalanced parentheses after {name}")));
            };
            column_list = text[j..end].to_string();
            j = skip_space_and_comments(text, end);
        }
        if !keyword_at(text, j, "AS") {
            if defs.is_empty() {
                return None;
            }
            return Some(Err(format!("expected AS after {name}")));
        }
        j = skip_space_and_comments(text, j + 2);
        if keyword_at(text, j, "NOT") {
            j = skip_space_and_comments(text, j + 3);
        }
        if keyword_at(text, j, "MATERIALIZED") {
            j = skip_space_and_comments(text, j + 12);
        }
        if !text[j..].starts_with('(') {
            if defs.is_empty() {
                return None;
            }
            return Some(Err(format!("expected ( after {name} AS")));
        }
        let Some(end) = matching_paren(text, j) else {
            return Some(Err(format!("unbalanced parentheses in the body of {name}")));
        };
        let header = if column_list.is_empty() { name.clone() } else { format!("{name}{column_list}") };
        defs.push(CteDef {
            name: header,
            sql: text[j + 1..end - 1].trim().to_string(),
        });
        i = skip_space_and_comments(text, end);
        if text[i..].starts_with(',') {
            i = skip_space_and_comments(text, i + 1);
        } else {
            break;
        }
    }
    if defs.is_empty() {
        None
    } else {
        Some(Ok(defs))
    }
}

fn cte_base_name(header: &str) -> &str {
    header.split('(').next().unwrap_or(header).trim()
}

#[derive(Deserialize)]
struct WireSelection {
    #[serde(default)]
    tables: Vec<String>,
    #[serde(default)]
    columns: Vec<String>,
}

/// Parses a view-generator reply against the chunk's tables.
pub fn parse_view_reply(reply: &str, chunk_index: usize, lookup: &dyn SchemaLookup) -> Result<ViewReply, String> {
    let json = json_blocks(reply);
    let Some(json_block) = json.last() else {
        return Err("no ```json selection block found".into());
    };
    let wire: WireSelection = serde_json::from_str(&json_block.body)
        .map_err(|e| format!("selection block is not valid JSON of the form {{\"tables\": [...], \"columns\": [...]}}: {e}"))?;

    let mut selection = SelectionRecord::default();
    let mut selection_errors = Vec::new();
    for t in &wire.tables {
        match lookup.resolve_table(t.trim()) {
            Some(name) => {
                selection.tables.insert(name);
            }
            None => selection_errors.push(format!("selected table {} is not in this part of the schema", t.trim())),
        }
    }
    for c in &wire.columns {
        let c = c.trim();
        let Some((t, col)) = c.rsplit_once('.') else {
            selection_errors.push(format!("selected column {c} must be written as table.column"));
            continue;
        };
        match lookup.resolve_table(t).and_then(|table| lookup.resolve_column(&table, col).map(|col| (table, col))) {
            Some((table, col)) => {
                selection.columns.insert(format!("{table}.{col}"));
                selection.tables.insert(table);
            }
            None => selection_errors.push(format!("selected column {c} is not in this part of the schema")),
        }
    }

    let sql = sql_blocks(reply);
    let mut ctes: Vec<CteDef> = Vec::new();
    let mut unnamed = 0;
    for block in &sql {
        match split_cte_definitions(&block.body) {
            Some(Ok(defs)) => ctes.extend(defs),
            Some(Err(problem)) => return Err(problem),
            None => {
                unnamed += 1;
                ctes.push(CteDef {
                    name: format!("chunk{chunk_index}_view{unnamed}"),
                    sql: block.body.trim().trim_end_matches(';').trim().to_string(),
                });
            }
        }
    }
    let mut seen = BTreeSet::new();
    for c in &ctes {
        if !seen.insert(cte_base_name(&c.name).to_ascii_lowercase()) {
            return Err(format!("CTE name {} is defined twice", cte_base_name(&c.name)));
        }
    }
    if ctes.is_empty() && !selection.is_empty() {
        return Err("the selection is not empty but no ```sql view was given".into());
    }

    let mut rationale = String::new();
    let mut cursor = 0;
    for b in blocks(reply) {
        rationale.push_str(&reply[cursor..b.start]);
        rationale.push('\n');
        cursor = b.end;
    }
    rationale.push_str(&reply[cursor..]);
    let rationale = rationale.split_whitespace().collect::<Vec<_>>().join(" ");

    let view = (!ctes.is_empty()).then(|| AgentView {
        chunk_index,
        ctes,
        rationale,
        sample_result: None,
    });
    Ok(ViewReply {
        view,
        selection,
        selection_errors,
        raw: reply.to_string(),
    })
}

pub fn parse_plan(reply: &str) -> Result<QueryPlan, String> {
    let json = json_blocks(reply);
    let body = match json.last() {
        Some(b) => b.body.clone(),
        None => {
            let start = reply.find('{').ok_or("no JSON plan found")?;
            let end = reply.rfind('}').ok_or("no JSON plan found")?;
            if end <= start {
                return Err("no JSON plan found".into());
            }
            reply[start..=end].to_string()
        }
    };
    let plan: QueryPlan = serde_json::from_str(&body).map_err(|e| format!("plan JSON is malformed: {e}"))?;
    if plan.steps.iter().all(|s| s.trim().is_empty()) {
        return Err("plan has no steps".into());
    }
    Ok(QueryPlan { degraded: false, ..plan })
}

pub fn parse_sql_reply(reply: &str) -> Result<String, String> {
    sql_blocks(reply)
        .last()
        .map(|b| b.body.trim().trim_end_matches(';').trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| "no ```sql block found".into())
}

fn parse_sql_candidates(reply: &str, k: usize) -> Result<Vec<String>, String> {
    let mut out: Vec<String> = Vec::new();
    for b in sql_blocks(reply) {
        let s = b.body.trim().trim_end_matches(';').trim().to_string();
        if !s.is_empty() && !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err("no ```sql block found".into());
    }
    out.truncate(k);
    Ok(out)
}

pub fn parse_revision(reply: &str, original: &str, dialect: SqlDialect) -> Revision {
    static VERDICT: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?im)^[ \t*#]*VERDICT[ \t*]*:[ \t*]*(CORRECT|REVISED)").expect("static regex"));
    let keep = |note: String| {
        log::warn!("revisor reply unusable, keeping the query: {note}");
        Revision {
            sql: original.to_string(),
            verdict: RevisionVerdict::Unparseable,
            note: Some(note),
        }
    };
    let verdict = VERDICT.captures(reply).map(|c| c[1].to_ascii_uppercase());
    match verdict.as_deref() {
        Some("CORRECT") => Revision {
            sql: original.to_string(),
            verdict: RevisionVerdict::Correct,
            note: None,
        },
        Some(_) => match parse_sql_reply(reply) {
            Ok(sql) => match parse(&sql, dialect) {
                Ok(_) => Revision {
                    sql,
                    verdict: RevisionVerdict::Revised,
                    note: None,
                },
                Err(e) => keep(format!("revised SQL does not parse: {e}")),
            },
            Err(e) => keep(e),
        },
        None => keep("no VERDICT line".into()),
    }
}

// ---------------------------------------------------------------------------
// Agents

fn values_block(values: &[RetrievalCandidate]) -> String {
    let mut by_column: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for v in values {
        let slot = by_column.entry(format!("{}.{}", v.entry.table, v.entry.column)).or_default();
        let quoted = format!("'{}'", v.entry.value.replace('\'', "''"));
        if !slot.contains(&quoted) {
            slot.push(quoted);
        }
    }
    by_column
        .into_iter()
        .map(|(col, vals)| format!("- {col}: {}", vals.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Text of a set of views for planner and generator prompts.
pub fn views_text(views: &[AgentView]) -> String {
    views
        .iter()
        .map(|v| {
            let mut s = format!("-- view from schema part {}\n{}", v.chunk_index, v.with_clause());
            if !v.rationale.is_empty() {
                s.push_str(&format!("\n-- rationale: {}", v.rationale));
            }
            if let Some(r) = &v.sample_result {
                s.push_str(&format!("\n-- sample result:\n{}", r.head(SAMPLE_ROWS).to_text()));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Stateless agent calls over a gateway.
#[derive(Clone)]
pub struct AgentSuite {
    pub gateway: LlmGateway,
    pub templates: PromptTemplates,
    pub dialect: SqlDialect,
    /// Token limit of the routed models; prompt context sections are clipped to it.
    pub context_limit: Option<usize>,
}

impl AgentSuite {
    pub fn new(gateway: LlmGateway, templates: PromptTemplates, dialect: SqlDialect) -> Self {
        Self {
            gateway,
            templates,
            dialect,
            context_limit: None,
        }
    }

    fn system(&self, role: AgentRole) -> String {
        self.templates
            .render(&format!("{}.system", role.as_str()), &[("dialect", self.dialect_label())])
    }

    fn dialect_label(&self) -> &'static str {
        match self.dialect {
            SqlDialect::Sqlite => "SQLite",
            SqlDialect::Snowflake => "Snowflake",
            SqlDialect::Generic => "standard",
        }
    }

    /// One call plus at most one reformat retry.
    fn ask<T>(
        &self,
        role: AgentRole,
        user: String,
        parser: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(T, String), AgentError> {
        let mut messages = vec![ChatMessage::system(self.system(role)), ChatMessage::user(user)];
        let first = self.gateway.chat(role, messages.clone())?.content;
        let problem = match parser(&first) {
            Ok(v) => return Ok((v, first)),
            Err(p) => p,
        };
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(self.templates.render("reformat", &[("problem", &problem)])));
        let second = self.gateway.chat(role, messages)?.content;
        match parser(&second) {
            Ok(v) => Ok((v, second)),
            Err(problem) => Err(AgentError::Unparseable { problem, reply: second }),
        }
    }

    pub fn rewrite_prompt(&self, question: &str, knowledge: &str) -> String {
        let knowledge_block = if knowledge.trim().is_empty() {
            String::new()
        } else {
            format!("\nExternal knowledge:\n{}", knowledge.trim())
        };
        self.templates
            .render("rewriter.user", &[("question", question.trim()), ("knowledge_block", &knowledge_block)])
    }

    pub fn rewrite_question(&self, question: &str, knowledge: &str) -> Result<RewrittenQuestion, AgentError> {
        let prompt = self.rewrite_prompt(question, knowledge);
        match self.ask(AgentRole::Rewriter, prompt, parse_rewrite) {
            Ok((r, _)) => Ok(r),
            Err(AgentError::Unparseable { problem, .. }) => {
                log::warn!("rewriter reply unusable ({problem}); using the original question");
                Ok(RewrittenQuestion::fallback(question, knowledge))
            }
            Err(e) => Err(e),
        }
    }

    pub fn view_prompt(&self, question: &RewrittenQuestion, chunk_index: usize, schema: &str, feedback: &ViewFeedback) -> String {
        let mut fb = String::new();
        if !feedback.is_empty() {
            fb.push_str("\nYour previous attempt needs repair.");
            if let Some(prior) = &feedback.prior_reply {
                fb.push_str(&format!("\n\nPrevious reply:\n{}", truncate_chars(prior, 6000)));
            }
            if let Some(err) = &feedback.execution_error {
                fb.push_str(&format!("\n\nExecution error:\n{}", truncate_chars(err, MAX_ERROR_CHARS)));
            }
            if let Some(msg) = &feedback.consistency_message {
                fb.push_str(&format!("\n\nConsistency problems:\n{}", truncate_chars(msg, MAX_ERROR_CHARS)));
            }
            if !feedback.retrieved_values.is_empty() {
                fb.push_str(&format!(
                    "\n\nValues stored in the database that resemble the literals you used:\n{}",
                    values_block(&feedback.retrieved_values)
                ));
            }
        }
        self.templates.render(
            "view_generator.user",
            &[
                ("question", &question.full_text),
                ("chunk_index", &chunk_index.to_string()),
                ("schema", schema),
                ("feedback_block", &fb),
            ],
        )
    }

    /// One view-generator turn. `Err(Unparseable)` is repairable.
    pub fn generate_view(
        &self,
        question: &RewrittenQuestion,
        chunk_index: usize,
        schema: &str,
        lookup: &dyn SchemaLookup,
        feedback: &ViewFeedback,
    ) -> Result<ViewReply, AgentError> {
        let prompt = self.view_prompt(question, chunk_index, schema, feedback);
        self.ask(AgentRole::ViewGenerator, prompt, |r| parse_view_reply(r, chunk_index, lookup))
            .map(|(v, _)| v)
    }

    fn views_section(&self, views: &[AgentView], fixed: usize) -> String {
        if views.is_empty() {
            return String::new();
        }
        clip_to_budget(format!("\nValidated views:\n{}", views_text(views)), fixed, self.context_limit)
    }

    pub fn plan_prompt(&self, question: &RewrittenQuestion, views: &[AgentView], schema: &str) -> String {
        let slots = |v: &str| -> String {
            self.templates
                .render("planner.user", &[("question", &question.full_text), ("schema", schema), ("views_block", v)])
        };
        let fixed = estimate_tokens(&slots("")) + estimate_tokens(&self.system(AgentRole::Planner));
        slots(&self.views_section(views, fixed))
    }

    pub fn plan_query(&self, question: &RewrittenQuestion, views: &[AgentView], schema: &str) -> Result<QueryPlan, AgentError> {
        let prompt = self.plan_prompt(question, views, schema);
        match self.ask(AgentRole::Planner, prompt, parse_plan) {
            Ok((p, _)) => Ok(p),
            Err(AgentError::Unparseable { problem, reply }) => {
                log::warn!("planner reply unusable ({problem}); using it as a single step");
                Ok(QueryPlan {
                    steps: vec![reply.trim().to_string()],
                    degraded: true,
                    ..QueryPlan::default()
                })
            }
            Err(e) => Err(e),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sql_prompt(
        &self,
        plan: &QueryPlan,
        question: &RewrittenQuestion,
        views: &[AgentView],
        schema: &str,
        prior_sql: Option<&str>,
        exec_error: Option<&str>,
        k: usize,
    ) -> String {
        let mut fb = String::new();
        if let Some(sql) = prior_sql {
            fb.push_str(&format!("\nPrevious query:\n```sql\n{}\n```", truncate_chars(sql, 8000)));
        }
        if let Some(err) = exec_error {
            fb.push_str(&format!("\nIt failed with:\n{}\nFix the query.", truncate_chars(err, MAX_ERROR_CHARS)));
        }
        let candidates = if k > 1 {
            format!("\nGive {k} different candidate queries, each in its own ```sql block.")
        } else {
            String::new()
        };
        let plan_text = plan.to_text();
        let slots = |v: &str| -> String {
            self.templates.render(
                "sql_generator.user",
                &[
                    ("question", &question.full_text),
                    ("plan", &plan_text),
                    ("schema", schema),
                    ("views_block", v),
                    ("feedback_block", &fb),
                    ("candidates_block", &candidates),
                ],
            )
        };
        let fixed = estimate_tokens(&slots("")) + estimate_tokens(&self.system(AgentRole::SqlGenerator));
        slots(&self.views_section(views, fixed))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn generate_sql(
        &self,
        plan: &QueryPlan,
        question: &RewrittenQuestion,
        views: &[AgentView],
        schema: &str,
        prior_sql: Option<&str>,
        exec_error: Option<&str>,
    ) -> Result<String, AgentError> {
        let prompt = self.sql_prompt(plan, question, views, schema, prior_sql, exec_error, 1);
        self.ask(AgentRole::SqlGenerator, prompt, parse_sql_reply).map(|(s, _)| s)
    }

    /// Up to `k` distinct candidates from one generator call.
    pub fn generate_sql_candidates(
        &self,
        plan: &QueryPlan,
        question: &RewrittenQuestion,
        views: &[AgentView],
        schema: &str,
        k: usize,
    ) -> Result<Vec<String>, AgentError> {
        let prompt = self.sql_prompt(plan, question, views, schema, None, None, k);
        self.ask(AgentRole::SqlGenerator, prompt, |r| parse_sql_candidates(r, k.max(1)))
            .map(|(s, _)| s)
    }

    pub fn revise_prompt(&self, question: &RewrittenQuestion, sql: &str, sample: Option<&ExecutionResult>) -> String {
        let sample_text = sample
            .map(|r| r.head(SAMPLE_ROWS).to_text())
            .unwrap_or_else(|| "(no result)".into());
        self.templates.render(
            "revisor.user",
            &[("question", &question.full_text), ("sql", sql), ("sample", &sample_text)],
        )
    }

    pub fn revise_sql(
        &self,
        question: &RewrittenQuestion,
        sql: &str,
        sample: Option<&ExecutionResult>,
    ) -> Result<Revision, AgentError> {
        let prompt = self.revise_prompt(question, sql, sample);
        let messages = vec![ChatMessage::system(self.system(AgentRole::Revisor)), ChatMessage::user(prompt)];
        let reply = self.gateway.chat(AgentRole::Revisor, messages)?.content;
        Ok(parse_revision(&reply, sql, self.dialect))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ColumnDef, DataType, SchemaCatalog};
    use crate::llm::ScriptedBackend;
    use std::sync::Arc;

    fn catalog() -> SchemaCatalog {
        let t = |name: &str, cols: &[&str]| {
            TableDef::new(name, cols.iter().map(|c| ColumnDef::new(*c, DataType::Text)).collect())
        };
        SchemaCatalog::new("mtg", vec![t("sets", &["id", "name", "code"]), t("cards", &["id", "name", "setcode"])], vec![])
            .unwrap()
    }

    fn suite(backend: Arc<ScriptedBackend>) -> AgentSuite {
        AgentSuite::new(LlmGateway::new(backend, "m"), PromptTemplates::builtin(), SqlDialect::Sqlite)
    }

    const REWRITE: &str = "TASK: count cards in Nyx\nREQUIRED OUTPUTS:\n- number of cards\nFILTERS:\n- set name is 'Nyx'\nSORTING/LIMIT: none";

    fn rewritten() -> RewrittenQuestion {
        parse_rewrite(REWRITE).unwrap()
    }

    #[test]
    fn rewrite_parses_sections() {
        let r = rewritten();
        assert_eq!(r.task, "count cards in Nyx");
        assert_eq!(r.required_outputs, vec!["number of cards"]);
        assert_eq!(r.filters, vec!["set name is 'Nyx'"]);
        assert_eq!(r.sorting_limit, "none");
        for label in REWRITE_LABELS {
            assert!(r.full_text.contains(&format!("{label}:")));
        }
        assert!(!r.fallback);
    }

    #[test]
    fn rewrite_prompt_omits_empty_knowledge() {
        let s = suite(Arc::new(ScriptedBackend::new()));
        assert!(!s.rewrite_prompt("How many?", "").contains("External knowledge"));
        assert!(s.rewrite_prompt("How many?", "Nyx is a set").contains("External knowledge:\nNyx is a set"));
    }

    #[test]
    fn rewrite_falls_back_after_two_bad_replies() {
        let backend = Arc::new(ScriptedBackend::new().on(AgentRole::Rewriter, &["whatever", "still no"]));
        let s = suite(backend.clone());
        let r = s.rewrite_question("How many cards?", "k").unwrap();
        assert!(r.fallback);
        assert!(r.full_text.contains("How many cards?") && r.full_text.contains("k"));
        assert_eq!(backend.requests().len(), 2);
        assert_eq!(backend.requests()[1].messages.len(), 4);
    }

    #[test]
    fn view_reply_single_cte() {
        let cat = catalog();
        let chunk = vec![cat.tables[0].clone()];
        let lookup = ChunkLookup { tables: &chunk, schema: &cat };
        let reply = "```sql\nnyx_card_set_cte AS (SELECT code FROM sets WHERE name = 'Nyx')\n```\nThis CTE only uses the sets table.\n```json\n{\"tables\": [\"sets\"], \"columns\": [\"sets.code\", \"sets.name\"]}\n```";
        let v = parse_view_reply(reply, 1, &lookup).unwrap();
        let view = v.view.unwrap();
        assert_eq!(view.ctes.len(), 1);
        assert_eq!(view.ctes[0].name, "nyx_card_set_cte");
        assert_eq!(view.ctes[0].sql, "SELECT code FROM sets WHERE name = 'Nyx'");
        assert_eq!(view.rationale, "This CTE only uses the sets table.");
        assert_eq!(v.selection.tables, BTreeSet::from(["sets".to_string()]));
        assert_eq!(v.selection.columns.len(), 2);
        assert!(v.selection_errors.is_empty());
        assert!(parse(&view.standalone_text(0), SqlDialect::Sqlite).is_ok());
    }

    #[test]
    fn view_reply_empty_selection() {
        let cat = catalog();
        let lookup = ChunkLookup { tables: &cat.tables, schema: &cat };
        let v = parse_view_reply("```json\n{\"tables\":[],\"columns\":[]}\n```", 2, &lookup).unwrap();
        assert!(v.view.is_none());
        assert!(v.selection.is_empty());
    }

    #[test]
    fn view_reply_without_json_is_unparseable() {
        let cat = catalog();
        let lookup = ChunkLookup { tables: &cat.tables, schema: &cat };
        assert!(parse_view_reply("```sql\nv AS (SELECT 1)\n```", 1, &lookup).is_err());
    }

    #[test]
    fn view_reply_with_clause_and_quotes() {
        let cat = catalog();
        let lookup = ChunkLookup { tables: &cat.tables, schema: &cat };
        let reply = "```sql\nWITH a AS (SELECT id FROM sets WHERE name = 'x)('), b(n) AS (SELECT count(*) FROM a)\nSELECT * FROM b;\n```\n```json\n{\"tables\":[\"SETS\"],\"columns\":[\"cards.bogus\", \"nope\"]}\n```";
        let v = parse_view_reply(reply, 1, &lookup).unwrap();
        let view = v.view.unwrap();
        assert_eq!(view.ctes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["a", "b(n)"]);
        assert_eq!(view.ctes[0].sql, "SELECT id FROM sets WHERE name = 'x)('");
        assert_eq!(v.selection.tables, BTreeSet::from(["sets".to_string()]));
        assert_eq!(v.selection_errors.len(), 2);
        assert!(parse(&view.program_text(), SqlDialect::Sqlite).is_ok());
    }

    #[test]
    fn plan_parsing_and_degradation() {
        let p = parse_plan("```json\n{\"steps\":[\"join\",\"count\"],\"ctes_to_use\":[\"v\"],\"tables_to_use\":[],\"output_columns\":[\"n\"],\"notes\":\"\"}\n```").unwrap();
        assert_eq!(p.steps, vec!["join", "count"]);
        assert!(parse_plan("just do it").is_err());
        let s = suite(Arc::new(ScriptedBackend::new().on(AgentRole::Planner, &["just do it"])));
        let plan = s.plan_query(&rewritten(), &[], "table(sets)").unwrap();
        assert!(plan.degraded);
        assert_eq!(plan.steps, vec!["just do it"]);
    }

    #[test]
    fn sql_extraction() {
        assert_eq!(parse_sql_reply("```sql\nSELECT 1\n```").unwrap(), "SELECT 1");
        assert_eq!(parse_sql_reply("a\n```sql\nSELECT 1\n```\nb\n```sql\nSELECT 2;\n```").unwrap(), "SELECT 2");
        assert!(parse_sql_reply("SELECT 1").is_err());
        assert_eq!(parse_sql_candidates("```sql\nSELECT 1\n```\n```sql\nSELECT 2\n```\n```sql\nSELECT 1\n```", 3).unwrap().len(), 2);
    }

    #[test]
    fn sql_prompt_carries_feedback() {
        let s = suite(Arc::new(ScriptedBackend::new()));
        let err = format!("no such column: set_name{}", "!".repeat(3000));
        let prompt = s.sql_prompt(&QueryPlan { steps: vec!["x".into()], ..Default::default() }, &rewritten(), &[], "", Some("SELECT set_name FROM sets"), Some(&err), 1);
        assert!(prompt.contains("SELECT set_name FROM sets"));
        assert!(prompt.contains(&err[..MAX_ERROR_CHARS]));
        assert!(!prompt.contains(&err[..MAX_ERROR_CHARS + 1]));
    }

    #[test]
    fn revision_outcomes() {
        let orig = "SELECT name FROM sets";
        let r = parse_revision("VERDICT: CORRECT\nLooks right.", orig, SqlDialect::Sqlite);
        assert_eq!((r.sql.as_str(), r.verdict), (orig, RevisionVerdict::Correct));
        let r = parse_revision("VERDICT: REVISED\n```sql\nSELECT code FROM sets\n```", orig, SqlDialect::Sqlite);
        assert_eq!((r.sql.as_str(), r.verdict), ("SELECT code FROM sets", RevisionVerdict::Revised));
        let r = parse_revision("VERDICT: REVISED\n```sql\nSELECT FROM WHERE\n```", orig, SqlDialect::Sqlite);
        assert_eq!((r.sql.as_str(), r.verdict), (orig, RevisionVerdict::Unparseable));
    }

    #[test]
    fn template_override_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("revisor.user.txt"), "Q={{question}}").unwrap();
        let t = PromptTemplates::from_dir(dir.path()).unwrap();
        assert_ne!(t.fingerprint(), PromptTemplates::builtin().fingerprint());
        assert_eq!(t.render("revisor.user", &[("question", "why")]), "Q=why");
        assert!(t.render("planner.system", &[]).contains("plan"));
    }

    #[test]
    fn prompt_is_clipped_to_context_limit() {
        let mut s = suite(Arc::new(ScriptedBackend::new()));
        s.context_limit = Some(400);
        let view = AgentView {
            chunk_index: 1,
            ctes: vec![CteDef { name: "v".into(), sql: format!("SELECT '{}'", "x".repeat(20_000)) }],
            rationale: String::new(),
            sample_result: None,
        };
        let prompt = s.plan_prompt(&rewritten(), &[view], "table(sets)");
        let total = estimate_tokens(&prompt) + estimate_tokens(&s.system(AgentRole::Planner));
        assert!(total <= 400, "{total}");
    }
}
