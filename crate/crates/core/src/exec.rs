//! Read-only SQL execution with row caps and timeouts.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sql::{parse, SqlDialect};

pub const DEFAULT_ROW_CAP: usize = 100;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
/// Row cap for re-executing gold and predicted SQL during evaluation.
pub const EVAL_ROW_CAP: usize = 10_000;
pub const MAX_ERROR_CHARS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub row_cap: usize,
    pub timeout_ms: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            row_cap: DEFAULT_ROW_CAP,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

impl ExecLimits {
    pub fn with_row_cap(mut self, row_cap: usize) -> Self {
        self.row_cap = row_cap;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

impl CellValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CellValue::Integer(i) => Some(*i as f64),
            CellValue::Real(r) => Some(*r),
            _ => None,
        }
    }
}

impl std::fmt::Display for CellValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellValue::Null => f.write_str("NULL"),
            CellValue::Integer(i) => write!(f, "{i}"),
            CellValue::Real(r) => write!(f, "{r}"),
            CellValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
    pub row_cap_hit: bool,
    pub elapsed_ms: u64,
}

impl ExecutionResult {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<CellValue>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns.len()));
        Self {
            columns,
            rows,
            row_cap_hit: false,
            elapsed_ms: 0,
        }
    }

    /// Copy holding at most the first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        Self {
            columns: self.columns.clone(),
            rows: self.rows.iter().take(n).cloned().collect(),
            row_cap_hit: self.row_cap_hit || self.rows.len() > n,
            elapsed_ms: self.elapsed_ms,
        }
    }

    /// Pipe-separated rendering used inside prompts.
    pub fn to_text(&self) -> String {
        let mut out = self.columns.join(" | ");
        for row in &self.rows {
            out.push('\n');
            out.push_str(&row.iter().map(ToString::to_string).collect::<Vec<_>>().join(" | "));
        }
        if self.row_cap_hit {
            out.push_str("\n...");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Syntax,
    UnknownIdentifier,
    Timeout,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ExecutionError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ExecutionError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        let message: String = message.into();
        let mut message: String = message.chars().take(MAX_ERROR_CHARS).collect();
        if message.trim().is_empty() {
            message = "unknown error".into();
        }
        Self { kind, message }
    }

    fn classify(message: String) -> Self {
        let lower = message.to_lowercase();
        let kind = if lower.contains("syntax error") || lower.contains("incomplete input") || lower.contains("unrecognized token") {
            ErrorKind::Syntax
        } else if lower.contains("no such table")
            || lower.contains("no such column")
            || lower.contains("no such function")
            || lower.contains("ambiguous column")
        {
            ErrorKind::UnknownIdentifier
        } else if lower.contains("interrupt") {
            ErrorKind::Timeout
        } else {
            ErrorKind::Other
        };
        Self::new(kind, message)
    }
}

pub type ExecOutcome = Result<ExecutionResult, ExecutionError>;

pub fn is_valid(outcome: &ExecOutcome) -> bool {
    outcome.is_ok()
}

pub trait ExecutionBackend: Send + Sync {
    fn execute(&self, sql: &str, limits: &ExecLimits) -> ExecOutcome;
    fn describe(&self) -> String;
}

/// Executes against an SQLite file opened read-only, one connection per call.
#[derive(Debug, Clone)]
pub struct SqliteBackend {
    path: PathBuf,
    /// When set, elapsed times are reported as zero so outputs are reproducible.
    frozen_clock: bool,
}

impl SqliteBackend {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            frozen_clock: false,
        }
    }

    pub fn with_frozen_clock(mut self) -> Self {
        self.frozen_clock = true;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn run(&self, sql: &str, limits: &ExecLimits) -> ExecOutcome {
        let start = Instant::now();
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| ExecutionError::new(ErrorKind::Other, format!("cannot open database: {e}")))?;
        conn.pragma_update(None, "query_only", true)
            .map_err(|e| ExecutionError::new(ErrorKind::Other, e.to_string()))?;
        let deadline = start + Duration::from_millis(limits.timeout_ms);
        conn.progress_handler(1000, Some(move || Instant::now() >= deadline))
            .map_err(|e| ExecutionError::new(ErrorKind::Other, e.to_string()))?;

        let to_err = |e: rusqlite::Error| {
            if Instant::now() >= deadline {
                ExecutionError::new(
                    ErrorKind::Timeout,
                    format!("interrupted: query exceeded {} ms ({e})", limits.timeout_ms),
                )
            } else {
                ExecutionError::classify(e.to_string())
            }
        };
        let mut stmt = conn.prepare(sql).map_err(to_err)?;
        if !stmt.readonly() {
            return Err(ExecutionError::new(ErrorKind::Other, "only read-only queries may be executed"));
        }
        let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut row_cap_hit = false;
        let mut cursor = stmt.query([]).map_err(to_err)?;
        while let Some(row) = cursor.next().map_err(to_err)? {
            if rows.len() == limits.row_cap {
                row_cap_hit = true;
                break;
            }
            let mut values = Vec::with_capacity(width);
            for i in 0..width {
                values.push(match row.get_ref(i).map_err(to_err)? {
                    ValueRef::Null => CellValue::Null,
                    ValueRef::Integer(v) => CellValue::Integer(v),
                    ValueRef::Real(v) => CellValue::Real(v),
                    ValueRef::Text(t) => CellValue::Text(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(b) => CellValue::Text(hex::encode(b)),
                });
            }
            rows.push(values);
        }
        let elapsed_ms = if self.frozen_clock {
            0
        } else {
            start.elapsed().as_millis() as u64
        };
        Ok(ExecutionResult {
            columns,
            rows,
            row_cap_hit,
            elapsed_ms,
        })
    }
}

impl ExecutionBackend for SqliteBackend {
    fn execute(&self, sql: &str, limits: &ExecLimits) -> ExecOutcome {
        match parse(sql, SqlDialect::Sqlite) {
            Ok(program) if !program.is_read_only() => {
                return Err(ExecutionError::new(
                    ErrorKind::Other,
                    "only SELECT or WITH queries may be executed",
                ))
            }
            Ok(program) if program.statements.len() > 1 => {
                return Err(ExecutionError::new(ErrorKind::Other, "exactly one statement may be executed"))
            }
            // Parse failures are left to the engine, whose message the agents see.
            _ => {}
        }
        self.run(sql, limits)
    }

    fn describe(&self) -> String {
        format!("sqlite:{}", self.path.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (tempfile::TempDir, SqliteBackend) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch("CREATE TABLE big_table (id INTEGER, name TEXT);").unwrap();
        for i in 0..150 {
            conn.execute("INSERT INTO big_table VALUES (?1, ?2)", rusqlite::params![i, format!("n{i}")])
                .unwrap();
        }
        drop(conn);
        (dir, SqliteBackend::new(path))
    }

    #[test]
    fn select_one() {
        let (_d, b) = fixture();
        let r = b.execute("SELECT 1", &ExecLimits::default()).unwrap();
        assert_eq!(r.columns, vec!["1"]);
        assert_eq!(r.rows, vec![vec![CellValue::Integer(1)]]);
        assert!(is_valid(&Ok(r)));
    }

    #[test]
    fn missing_table() {
        let (_d, b) = fixture();
        let e = b.execute("SELECT * FROM missing_table", &ExecLimits::default()).unwrap_err();
        assert_eq!(e.kind, ErrorKind::UnknownIdentifier);
        assert!(!is_valid(&Err(e)));
    }

    #[test]
    fn syntax_error() {
        let (_d, b) = fixture();
        let e = b.execute("SELECT * FROM big_table ORDER id", &ExecLimits::default()).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Syntax);
    }

    #[test]
    fn row_cap() {
        let (_d, b) = fixture();
        let r = b.execute("SELECT * FROM big_table", &ExecLimits::default()).unwrap();
        assert_eq!(r.rows.len(), 100);
        assert!(r.row_cap_hit);
        let r = b.execute("SELECT * FROM big_table", &ExecLimits::default().with_row_cap(150)).unwrap();
        assert_eq!(r.rows.len(), 150);
        assert!(!r.row_cap_hit);
    }

    #[test]
    fn timeout() {
        let (_d, b) = fixture();
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        let e = b
            .execute(sql, &ExecLimits { row_cap: 10, timeout_ms: 50 })
            .unwrap_err();
        assert_eq!(e.kind, ErrorKind::Timeout);
    }

    #[test]
    fn writes_are_rejected_and_file_unchanged() {
        let (_d, b) = fixture();
        let before = std::fs::read(b.path()).unwrap();
        for sql in [
            "DELETE FROM big_table",
            "DROP TABLE big_table",
            "INSERT INTO big_table VALUES (1, 'x')",
            "SELECT 1; DELETE FROM big_table",
            "PRAGMA user_version = 3",
        ] {
            assert!(b.execute(sql, &ExecLimits::default()).is_err(), "{sql}");
        }
        assert_eq!(std::fs::read(b.path()).unwrap(), before);
    }

    #[test]
    fn error_messages_are_truncated() {
        let e = ExecutionError::new(ErrorKind::Other, "x".repeat(5000));
        assert_eq!(e.message.chars().count(), MAX_ERROR_CHARS);
        assert_eq!(ExecutionError::new(ErrorKind::Other, "").message, "unknown error");
    }
}
