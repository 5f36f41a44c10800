//! Normalized schema catalog.
//!
//! A [`SchemaCatalog`] holds the tables, columns and foreign-key edges of one
//! database. Catalogs are built either by introspecting an SQLite file or by
//! loading a JSON schema manifest, and are immutable once built. Prompt text
//! for whole catalogs and for chunks is produced by [`serialize_tables`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read database {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("database {0} has zero user tables")]
    ZeroTables(String),
    #[error("duplicate table name {0}")]
    DuplicateTable(String),
    #[error("duplicate column {column} in table {table}")]
    DuplicateColumn { table: String, column: String },
    #[error("table {0} has no columns")]
    EmptyTable(String),
    #[error("column name in table {0} is empty")]
    EmptyColumnName(String),
    #[error("foreign key {0} references a missing table or column")]
    DanglingForeignKey(String),
    #[error("invalid schema manifest: {0}")]
    Manifest(String),
}

/// Normalized column type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Integer,
    Real,
    Date,
    Timestamp,
    Boolean,
    Other,
}

impl DataType {
    /// Maps a vendor type name (SQLite affinity names, Snowflake types, ...)
    /// onto one of the seven tags.
    pub fn normalize(raw: &str) -> DataType {
        let t = raw.trim().to_ascii_uppercase();
        if t.is_empty() {
            return DataType::Other;
        }
        if t.contains("TIMESTAMP") || t.contains("DATETIME") {
            DataType::Timestamp
        } else if t.starts_with("DATE") {
            DataType::Date
        } else if t.starts_with("BOOL") || t == "BIT" {
            DataType::Boolean
        } else if t.contains("INT") {
            DataType::Integer
        } else if t.contains("CHAR")
            || t.contains("TEXT")
            || t.contains("CLOB")
            || t.contains("STRING")
            || t == "VARIANT"
        {
            DataType::Text
        } else if t.contains("REAL")
            || t.contains("FLOA")
            || t.contains("DOUB")
            || t.contains("NUMERIC")
            || t.contains("DECIMAL")
            || t.starts_with("NUMBER")
        {
            DataType::Real
        } else {
            DataType::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Integer => "integer",
            DataType::Real => "real",
            DataType::Date => "date",
            DataType::Timestamp => "timestamp",
            DataType::Boolean => "boolean",
            DataType::Other => "other",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub data_type: DataType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            data_type,
            description: None,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Primary-key column names in key order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub primary_key: Vec<String>,
    /// At most three example rows, rendered as text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rows: Option<Vec<Vec<String>>>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        Self {
            name: name.into(),
            columns,
            description: None,
            primary_key: Vec::new(),
            sample_rows: None,
        }
    }

    pub fn with_primary_key<I, S>(mut self, cols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.primary_key = cols.into_iter().map(Into::into).collect();
        self
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

/// A foreign-key edge `child_table.child_column -> parent_table.parent_column`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKeyRef {
    pub child_table: String,
    pub child_column: String,
    pub parent_table: String,
    pub parent_column: String,
}

impl ForeignKeyRef {
    pub fn new(
        child_table: impl Into<String>,
        child_column: impl Into<String>,
        parent_table: impl Into<String>,
        parent_column: impl Into<String>,
    ) -> Self {
        Self {
            child_table: child_table.into(),
            child_column: child_column.into(),
            parent_table: parent_table.into(),
            parent_column: parent_column.into(),
        }
    }

    pub fn touches(&self, table: &str) -> bool {
        self.child_table.eq_ignore_ascii_case(table) || self.parent_table.eq_ignore_ascii_case(table)
    }
}

impl fmt::Display for ForeignKeyRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{} -> {}.{}",
            self.child_table, self.child_column, self.parent_table, self.parent_column
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    #[serde(default)]
    pub relations: Vec<ForeignKeyRef>,
}

impl SchemaCatalog {
    /// Builds a catalog and checks its invariants.
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<TableDef>,
        relations: Vec<ForeignKeyRef>,
    ) -> Result<Self, CatalogError> {
        let catalog = Self {
            db_id: db_id.into(),
            tables,
            relations,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(CatalogError::DuplicateTable(table.name.clone()));
            }
            if table.columns.is_empty() {
                return Err(CatalogError::EmptyTable(table.name.clone()));
            }
            let mut cols = HashSet::new();
            for column in &table.columns {
                if column.name.is_empty() {
                    return Err(CatalogError::EmptyColumnName(table.name.clone()));
                }
                if !cols.insert(column.name.to_lowercase()) {
                    return Err(CatalogError::DuplicateColumn {
                        table: table.name.clone(),
                        column: column.name.clone(),
                    });
                }
            }
        }
        for fk in &self.relations {
            let child_ok = self
                .table(&fk.child_table)
                .is_some_and(|t| t.column(&fk.child_column).is_some());
            let parent_ok = self
                .table(&fk.parent_table)
                .is_some_and(|t| t.column(&fk.parent_column).is_some());
            if !child_ok || !parent_ok {
                return Err(CatalogError::DanglingForeignKey(fk.to_string()));
            }
        }
        Ok(())
    }

    /// Case-insensitive table lookup.
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    /// Relations whose two endpoints both lie in `tables`.
    pub fn relations_within(&self, tables: &[TableDef]) -> Vec<ForeignKeyRef> {
        let inside = |name: &str| tables.iter().any(|t| t.name.eq_ignore_ascii_case(name));
        self.relations
            .iter()
            .filter(|fk| inside(&fk.child_table) && inside(&fk.parent_table))
            .cloned()
            .collect()
    }

    pub fn serialize(&self, detail: DetailLevel) -> String {
        serialize_tables(&self.tables, &self.relations, detail)
    }

    /// Loads a JSON schema manifest from disk.
    pub fn from_manifest_path(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_manifest_json(&text)
    }

    pub fn from_manifest_json(text: &str) -> Result<Self, CatalogError> {
        let manifest: SchemaManifest =
            serde_json::from_str(text).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        manifest.into_catalog()
    }

    pub fn to_manifest(&self) -> SchemaManifest {
        SchemaManifest {
            db_id: self.db_id.clone(),
            tables: self
                .tables
                .iter()
                .map(|t| ManifestTable {
                    name: t.name.clone(),
                    description: t.description.clone(),
                    primary_key: t.primary_key.clone(),
                    columns: t
                        .columns
                        .iter()
                        .map(|c| ManifestColumn {
                            name: c.name.clone(),
                            data_type: c.data_type.as_str().to_string(),
                            description: c.description.clone(),
                        })
                        .collect(),
                })
                .collect(),
            foreign_keys: self
                .relations
                .iter()
                .map(|fk| {
                    [
                        fk.child_table.clone(),
                        fk.child_column.clone(),
                        fk.parent_table.clone(),
                        fk.parent_column.clone(),
                    ]
                })
                .collect(),
        }
    }
}

/// On-disk schema manifest for schemas that exist only as metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaManifest {
    pub db_id: String,
    pub tables: Vec<ManifestTable>,
    #[serde(default)]
    pub foreign_keys: Vec<[String; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTable {
    pub name: String,
    pub columns: Vec<ManifestColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub primary_key: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestColumn {
    pub name: String,
    #[serde(rename = "type", default)]
    pub data_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl SchemaManifest {
    pub fn into_catalog(self) -> Result<SchemaCatalog, CatalogError> {
        let tables = self
            .tables
            .into_iter()
            .map(|t| TableDef {
                name: t.name,
                description: t.description,
                primary_key: t.primary_key,
                sample_rows: None,
                columns: t
                    .columns
                    .into_iter()
                    .map(|c| ColumnDef {
                        name: c.name,
                        data_type: DataType::normalize(&c.data_type),
                        description: c.description,
                    })
                    .collect(),
            })
            .collect();
        let relations = self
            .foreign_keys
            .into_iter()
            .map(|[a, b, c, d]| ForeignKeyRef::new(a, b, c, d))
            .collect();
        SchemaCatalog::new(self.db_id, tables, relations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailLevel {
    NamesOnly,
    #[default]
    Full,
}

/// Renders tables and the given relations as prompt text.
///
/// Only relations whose both endpoints are among `tables` are emitted, so a
/// chunk never mentions tables it does not contain.
pub fn serialize_tables(
    tables: &[TableDef],
    relations: &[ForeignKeyRef],
    detail: DetailLevel,
) -> String {
    let mut out = String::new();
    for (i, table) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("table(");
        out.push_str(&table.name);
        out.push(')');
        if detail == DetailLevel::Full {
            if let Some(desc) = &table.description {
                out.push_str(" -- ");
                out.push_str(desc);
            }
        }
        out.push('\n');
        for column in &table.columns {
            out.push_str("  ");
            out.push_str(&column.name);
            if detail == DetailLevel::Full {
                out.push_str(": ");
                out.push_str(column.data_type.as_str());
                if table
                    .primary_key
                    .iter()
                    .any(|k| k.eq_ignore_ascii_case(&column.name))
                {
                    out.push_str(" primary key");
                }
                if let Some(desc) = &column.description {
                    out.push_str(" -- ");
                    out.push_str(desc);
                }
            }
            out.push('\n');
        }
        if detail == DetailLevel::Full {
            if let Some(rows) = &table.sample_rows {
                for row in rows.iter().take(3) {
                    out.push_str("  sample: (");
                    out.push_str(&row.join(", "));
                    out.push_str(")\n");
                }
            }
        }
    }
    let inside = |name: &str| tables.iter().any(|t| t.name.eq_ignore_ascii_case(name));
    let visible: Vec<_> = relations
        .iter()
        .filter(|fk| inside(&fk.child_table) && inside(&fk.parent_table))
        .collect();
    if !visible.is_empty() {
        out.push('\n');
        for fk in visible {
            out.push_str("foreign key: ");
            out.push_str(&fk.to_string());
            out.push('\n');
        }
    }
    out
}

/// Approximate token counter for prompt budgeting.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEstimator;

impl TokenEstimator for ByteEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    ByteEstimator.estimate(text)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Number of sample rows to capture per table (capped at 3).
    pub sample_rows: usize,
}

/// Introspects an SQLite file through a read-only connection.
pub fn ingest_from_database(path: &Path) -> Result<SchemaCatalog, CatalogError> {
    ingest_with_options(path, IngestOptions::default())
}

pub fn ingest_with_options(
    path: &Path,
    options: IngestOptions,
) -> Result<SchemaCatalog, CatalogError> {
    let unreadable = |e: rusqlite::Error| CatalogError::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if !path.is_file() {
        return Err(CatalogError::Unreadable {
            path: path.display().to_string(),
            message: "no such file".into(),
        });
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(unreadable)?;

    let mut stmt = conn
        .prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' \
             AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )
        .map_err(unreadable)?;
    let names: Vec<String> = stmt
        .query_map([], |row| row.get(0))
        .map_err(unreadable)?
        .collect::<Result<_, _>>()
        .map_err(unreadable)?;
    if names.is_empty() {
        return Err(CatalogError::ZeroTables(path.display().to_string()));
    }

    let mut tables = Vec::with_capacity(names.len());
    let mut raw_fks = Vec::new();
    for name in &names {
        let quoted = quote_ident(name);
        let mut info = conn
            .prepare(&format!("PRAGMA table_info({quoted})"))
            .map_err(unreadable)?;
        let mut pk: Vec<(i64, String)> = Vec::new();
        let columns: Vec<ColumnDef> = info
            .query_map([], |row| {
                let col: String = row.get(1)?;
                let ty: Option<String> = row.get(2)?;
                let pk_pos: i64 = row.get(5)?;
                Ok((col, ty.unwrap_or_default(), pk_pos))
            })
            .map_err(unreadable)?
            .map(|r| {
                r.map(|(col, ty, pk_pos)| {
                    if pk_pos > 0 {
                        pk.push((pk_pos, col.clone()));
                    }
                    ColumnDef::new(col, DataType::normalize(&ty))
                })
            })
            .collect::<Result<_, _>>()
            .map_err(unreadable)?;
        pk.sort();

        let mut fk_stmt = conn
            .prepare(&format!("PRAGMA foreign_key_list({quoted})"))
            .map_err(unreadable)?;
        let fks: Vec<(String, String, Option<String>)> = fk_stmt
            .query_map([], |row| Ok((row.get(2)?, row.get(3)?, row.get(4)?)))
            .map_err(unreadable)?
            .collect::<Result<_, _>>()
            .map_err(unreadable)?;
        for (parent, from, to) in fks {
            raw_fks.push((name.clone(), from, parent, to));
        }

        let sample_rows = if options.sample_rows > 0 {
            Some(sample_rows(&conn, &quoted, options.sample_rows.min(3)).map_err(unreadable)?)
        } else {
            None
        };

        tables.push(TableDef {
            name: name.clone(),
            columns,
            description: None,
            primary_key: pk.into_iter().map(|(_, c)| c).collect(),
            sample_rows,
        });
    }

    let db_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut catalog = SchemaCatalog {
        db_id,
        tables,
        relations: Vec::new(),
    };
    // SQLite does not enforce that declared parents exist; keep only edges
    // that resolve, using the parent's primary key when `to` is omitted.
    let mut relations = Vec::new();
    for (child, from, parent, to) in raw_fks {
        let Some(parent_def) = catalog.table(&parent) else {
            log::warn!("{}: dropping foreign key {child}.{from} -> missing table {parent}", catalog.db_id);
            continue;
        };
        let parent_col = match to {
            Some(col) => parent_def.column(&col).map(|c| c.name.clone()),
            None => parent_def.primary_key.first().cloned(),
        };
        let child_col = catalog
            .table(&child)
            .and_then(|t| t.column(&from))
            .map(|c| c.name.clone());
        match (child_col, parent_col) {
            (Some(cc), Some(pc)) => {
                let fk = ForeignKeyRef::new(child, cc, parent_def.name.clone(), pc);
                if !relations.contains(&fk) {
                    relations.push(fk);
                }
            }
            _ => log::warn!("{}: dropping unresolvable foreign key on {child}.{from}", catalog.db_id),
        }
    }
    catalog.relations = relations;
    catalog.validate()?;
    Ok(catalog)
}

fn sample_rows(conn: &Connection, quoted: &str, n: usize) -> rusqlite::Result<Vec<Vec<String>>> {
    let mut stmt = conn.prepare(&format!("SELECT * FROM {quoted} LIMIT {n}"))?;
    let width = stmt.column_count();
    let rows = stmt
        .query_map([], |row| {
            (0..width)
                .map(|i| {
                    let v: rusqlite::types::Value = row.get(i)?;
                    Ok(match v {
                        rusqlite::types::Value::Null => "NULL".to_string(),
                        rusqlite::types::Value::Integer(i) => i.to_string(),
                        rusqlite::types::Value::Real(r) => r.to_string(),
                        rusqlite::types::Value::Text(t) => t,
                        rusqlite::types::Value::Blob(_) => "<blob>".to_string(),
                    })
                })
                .collect()
        })?
        .collect();
    rows
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cards_db(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("cards.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE cards (uuid TEXT PRIMARY KEY, name TEXT);
             CREATE TABLE legalities (id INTEGER PRIMARY KEY, format TEXT, uuid TEXT REFERENCES cards(uuid));
             CREATE TABLE sets (id INTEGER PRIMARY KEY, name VARCHAR(40));",
        )
        .unwrap();
        path
    }

    #[test]
    fn ingest_two_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mtg.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE sets (id INTEGER, name TEXT); CREATE TABLE legalities (id INTEGER, format TEXT);",
        )
        .unwrap();
        drop(conn);
        let catalog = ingest_from_database(&path).unwrap();
        assert_eq!(catalog.db_id, "mtg");
        assert_eq!(catalog.table_names(), vec!["sets", "legalities"]);
        assert_eq!(catalog.column_count(), 4);
        assert_eq!(catalog.tables[0].columns[1].data_type, DataType::Text);
    }

    #[test]
    fn ingest_recovers_declared_foreign_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = cards_db(dir.path());
        let catalog = ingest_from_database(&path).unwrap();
        assert_eq!(
            catalog.relations,
            vec![ForeignKeyRef::new("legalities", "uuid", "cards", "uuid")]
        );
        assert_eq!(catalog.table("cards").unwrap().primary_key, vec!["uuid"]);
    }

    #[test]
    fn ingest_empty_database_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.sqlite");
        Connection::open(&path)
            .unwrap()
            .execute_batch("PRAGMA user_version = 1;")
            .unwrap();
        let err = ingest_from_database(&path).unwrap_err();
        assert!(matches!(err, CatalogError::ZeroTables(_)), "{err}");
        assert!(err.to_string().contains("zero user tables"));
    }

    #[test]
    fn ingest_garbage_file_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.sqlite");
        std::fs::write(&path, b"definitely not a database file, just bytes....").unwrap();
        assert!(matches!(
            ingest_from_database(&path),
            Err(CatalogError::Unreadable { .. })
        ));
        assert!(matches!(
            ingest_from_database(&dir.path().join("missing.sqlite")),
            Err(CatalogError::Unreadable { .. })
        ));
    }

    #[test]
    fn names_only_has_no_types() {
        let catalog = SchemaCatalog::new(
            "x",
            vec![TableDef::new(
                "sets",
                vec![ColumnDef::new("id", DataType::Integer), ColumnDef::new("name", DataType::Text)],
            )],
            vec![],
        )
        .unwrap();
        let text = catalog.serialize(DetailLevel::NamesOnly);
        assert_eq!(text, "table(sets)\n  id\n  name\n");
        let full = catalog.serialize(DetailLevel::Full);
        assert_eq!(full, "table(sets)\n  id: integer\n  name: text\n");
        assert_eq!(full, catalog.serialize(DetailLevel::Full));
    }

    #[test]
    fn chunk_serialization_hides_cross_chunk_keys() {
        let sets = TableDef::new("sets", vec![ColumnDef::new("code", DataType::Text)]);
        let leg = TableDef::new("legalities", vec![ColumnDef::new("set_code", DataType::Text)]);
        let fk = ForeignKeyRef::new("sets", "code", "legalities", "set_code");
        let only_sets = serialize_tables(std::slice::from_ref(&sets), std::slice::from_ref(&fk), DetailLevel::Full);
        assert!(!only_sets.contains("foreign key"));
        let both = serialize_tables(&[sets, leg], &[fk], DetailLevel::Full);
        assert!(both.ends_with("foreign key: sets.code -> legalities.set_code\n"));
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghij"), 3);
    }

    #[test]
    fn invariants_rejected() {
        let t = |n: &str| TableDef::new(n, vec![ColumnDef::new("a", DataType::Text)]);
        assert!(matches!(
            SchemaCatalog::new("x", vec![t("A"), t("a")], vec![]),
            Err(CatalogError::DuplicateTable(_))
        ));
        assert!(matches!(
            SchemaCatalog::new("x", vec![t("a")], vec![ForeignKeyRef::new("a", "a", "b", "a")]),
            Err(CatalogError::DanglingForeignKey(_))
        ));
        assert!(matches!(
            SchemaCatalog::new("x", vec![TableDef::new("e", vec![])], vec![]),
            Err(CatalogError::EmptyTable(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let json = r#"{"db_id":"wb","tables":[{"name":"pop","description":"population",
            "columns":[{"name":"country","type":"VARCHAR","description":"ISO name"},{"name":"year_2003","type":"NUMBER"}]},
            {"name":"codes","columns":[{"name":"country","type":"TEXT"}]}],
            "foreign_keys":[["pop","country","codes","country"]]}"#;
        let catalog = SchemaCatalog::from_manifest_json(json).unwrap();
        assert_eq!(catalog.tables[0].columns[1].data_type, DataType::Real);
        let again = SchemaCatalog::from_manifest_json(&serde_json::to_string(&catalog.to_manifest()).unwrap()).unwrap();
        assert_eq!(again, catalog);
    }

    #[test]
    fn type_normalization() {
        assert_eq!(DataType::normalize("VARCHAR(20)"), DataType::Text);
        assert_eq!(DataType::normalize("bigint"), DataType::Integer);
        assert_eq!(DataType::normalize("DOUBLE PRECISION"), DataType::Real);
        assert_eq!(DataType::normalize("DATE"), DataType::Date);
        assert_eq!(DataType::normalize("DATETIME"), DataType::Timestamp);
        assert_eq!(DataType::normalize("TIMESTAMP_NTZ"), DataType::Timestamp);
        assert_eq!(DataType::normalize("BOOLEAN"), DataType::Boolean);
        assert_eq!(DataType::normalize("BLOB"), DataType::Other);
        assert_eq!(DataType::normalize(""), DataType::Other);
    }

    proptest::proptest! {
        #[test]
        fn estimate_subadditive(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            proptest::prop_assert!(estimate_tokens(&joined) <= estimate_tokens(&a) + estimate_tokens(&b) + 1);
            proptest::prop_assert!(estimate_tokens(&a) <= estimate_tokens(&joined));
        }
    }
}
