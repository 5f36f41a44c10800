//! Offline index of text-like database values and online similarity lookup.
//!
//! Values that look like entity names (mostly alphabetic, at most 64
//! characters) are normalized, signed with MinHash and bucketed by LSH band.
//! A lookup gathers the literal's exact matches plus every value sharing an
//! LSH bucket with it, then keeps candidates whose edit similarity and
//! semantic similarity both reach the configured thresholds.
//!
//! # File format
//!
//! An index is stored as JSON lines. The first line is a header object
//! `{"format": "viewsql-value-index", "version": 1, "db_id", "params",
//! "source_hash", "entries"}`; each following line is one entry
//! `{"table", "column", "value", "signature": [u64; num_perm]}`.

pub mod embedding;
pub mod minhash;

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{quote_ident, DataType, SchemaCatalog};
pub use embedding::{EmbeddingError, EmbeddingProvider, HttpEmbeddingProvider, NgramEmbedding};
pub use minhash::{LshParams, MinHasher};

pub const MAX_VALUE_CHARS: usize = 64;
pub const MAX_VALUES_PER_COLUMN: usize = 50_000;
pub const MIN_ALPHA_FRACTION: f64 = 0.5;

const FORMAT_TAG: &str = "viewsql-value-index";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ValueIndexError {
    #[error("cannot read database {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("index file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub db_id: String,
    pub table: String,
    pub column: String,
    pub value: String,
    pub normalized: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub entry: ValueEntry,
    pub edit_similarity: f64,
    pub semantic_similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieveOptions {
    pub tau_edit: f64,
    pub tau_semantic: f64,
    pub limit: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            tau_edit: 0.5,
            tau_semantic: 0.5,
            limit: 10,
        }
    }
}

/// Lowercase with runs of whitespace collapsed to one space.
pub fn normalize_value(value: &str) -> String {
    value
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Entity-like values only: non-empty, short, and mostly alphabetic.
pub fn is_indexable(value: &str) -> bool {
    let trimmed = value.trim();
    if trimmed.is_empty() || trimmed.chars().count() > MAX_VALUE_CHARS {
        return false;
    }
    let (alpha, total) = trimmed
        .chars()
        .filter(|c| !c.is_whitespace())
        .fold((0usize, 0usize), |(a, t), c| (a + usize::from(c.is_alphabetic()), t + 1));
    total > 0 && alpha as f64 / total as f64 >= MIN_ALPHA_FRACTION
}

/// `1 - levenshtein(a, b) / max(len(a), len(b))`, over characters.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone)]
pub struct ValueIndex {
    db_id: String,
    source_hash: Option<String>,
    hasher: MinHasher,
    entries: Vec<ValueEntry>,
    signatures: Vec<Vec<u64>>,
    buckets: Vec<HashMap<u64, Vec<u32>>>,
    exact: HashMap<String, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    db_id: String,
    params: LshParams,
    #[serde(default)]
    source_hash: Option<String>,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    table: String,
    column: String,
    value: String,
    signature: Vec<u64>,
}

impl ValueIndex {
    pub fn new(db_id: impl Into<String>, params: LshParams) -> Self {
        Self {
            db_id: db_id.into(),
            source_hash: None,
            hasher: MinHasher::new(params),
            entries: Vec::new(),
            signatures: Vec::new(),
            buckets: vec![HashMap::new(); params.bands],
            exact: HashMap::new(),
        }
    }

    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn params(&self) -> LshParams {
        self.hasher.params()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ValueEntry] {
        &self.entries
    }

    pub fn source_hash(&self) -> Option<&str> {
        self.source_hash.as_deref()
    }

    pub fn set_source_hash(&mut self, hash: impl Into<String>) {
        self.source_hash = Some(hash.into());
    }

    /// Adds a value when it passes the indexability filter. Returns whether
    /// it was inserted.
    pub fn insert(&mut self, table: &str, column: &str, value: &str) -> bool {
        if !is_indexable(value) {
            return false;
        }
        let normalized = normalize_value(value);
        let signature = self.hasher.signature(&normalized);
        self.insert_signed(
            ValueEntry {
                db_id: self.db_id.clone(),
                table: table.to_string(),
                column: column.to_string(),
                value: value.to_string(),
                normalized,
            },
            signature,
        );
        true
    }

    fn insert_signed(&mut self, entry: ValueEntry, signature: Vec<u64>) {
        let id = self.entries.len() as u32;
        for (band, key) in self.hasher.band_keys(&signature).into_iter().enumerate() {
            self.buckets[band].entry(key).or_default().push(id);
        }
        self.exact.entry(entry.normalized.clone()).or_default().push(id);
        self.entries.push(entry);
        self.signatures.push(signature);
    }

    /// Entries sharing at least one LSH bucket with `literal`.
    pub fn lsh_candidates(&self, literal: &str) -> BTreeSet<u32> {
        let normalized = normalize_value(literal);
        let sig = self.hasher.signature(&normalized);
        let mut ids = BTreeSet::new();
        for (band, key) in self.hasher.band_keys(&sig).into_iter().enumerate() {
            if let Some(bucket) = self.buckets[band].get(&key) {
                ids.extend(bucket.iter().copied());
            }
        }
        ids
    }

    pub fn retrieve(
        &self,
        literal: &str,
        options: &RetrieveOptions,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<RetrievalCandidate>, ValueIndexError> {
        let query = normalize_value(literal);
        if query.is_empty() || options.limit == 0 {
            return Ok(Vec::new());
        }
        let exact: BTreeSet<u32> = self
            .exact
            .get(&query)
            .map(|ids| ids.iter().copied().collect())
            .unwrap_or_default();
        let mut ids = self.lsh_candidates(&query);
        ids.extend(exact.iter().copied());

        let mut semantic_cache: HashMap<&str, f64> = HashMap::new();
        let mut out: Vec<(bool, RetrievalCandidate)> = Vec::new();
        for id in ids {
            let entry = &self.entries[id as usize];
            let is_exact = exact.contains(&id);
            let (edit, semantic) = if is_exact {
                (1.0, 1.0)
            } else {
                let edit = edit_similarity(&query, &entry.normalized);
                if edit < options.tau_edit {
                    continue;
                }
                let semantic = match semantic_cache.get(entry.normalized.as_str()) {
                    Some(s) => *s,
                    None => {
                        let s = provider.similarity(&query, &entry.normalized)?.clamp(0.0, 1.0);
                        semantic_cache.insert(&entry.normalized, s);
                        s
                    }
                };
                (edit, semantic)
            };
            if is_exact || (edit >= options.tau_edit && semantic >= options.tau_semantic) {
                out.push((
                    is_exact,
                    RetrievalCandidate {
                        entry: entry.clone(),
                        edit_similarity: edit,
                        semantic_similarity: semantic,
                    },
                ));
            }
        }
        out.sort_by(|(ea, a), (eb, b)| {
            eb.cmp(ea)
                .then(b.semantic_similarity.total_cmp(&a.semantic_similarity))
                .then(b.edit_similarity.total_cmp(&a.edit_similarity))
                .then_with(|| a.entry.value.cmp(&b.entry.value))
                .then_with(|| a.entry.table.cmp(&b.entry.table))
                .then_with(|| a.entry.column.cmp(&b.entry.column))
        });
        out.truncate(options.limit);
        Ok(out.into_iter().map(|(_, c)| c).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), ValueIndexError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            db_id: self.db_id.clone(),
            params: self.params(),
            source_hash: self.source_hash.clone(),
            entries: self.entries.len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| ValueIndexError::Corrupt(e.to_string()))?;
        w.write_all(b"\n")?;
        for (entry, signature) in self.entries.iter().zip(&self.signatures) {
            let line = Line {
                table: entry.table.clone(),
                column: entry.column.clone(),
                value: entry.value.clone(),
                signature: signature.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| ValueIndexError::Corrupt(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ValueIndexError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| ValueIndexError::Corrupt("missing header".into()))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| ValueIndexError::Corrupt(e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(ValueIndexError::Corrupt(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if !header.params.is_valid() {
            return Err(ValueIndexError::Corrupt("invalid LSH parameters".into()));
        }
        let mut index = ValueIndex::new(header.db_id, header.params);
        index.source_hash = header.source_hash;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line =
                serde_json::from_str(&line).map_err(|e| ValueIndexError::Corrupt(e.to_string()))?;
            if l.signature.len() != header.params.num_perm {
                return Err(ValueIndexError::Corrupt(format!(
                    "signature length {} for value {:?}",
                    l.signature.len(),
                    l.value
                )));
            }
            let entry = ValueEntry {
                db_id: index.db_id.clone(),
                normalized: normalize_value(&l.value),
                table: l.table,
                column: l.column,
                value: l.value,
            };
            index.insert_signed(entry, l.signature);
        }
        if index.len() != header.entries {
            return Err(ValueIndexError::Corrupt(format!(
                "header promises {} entries, found {}",
                header.entries,
                index.len()
            )));
        }
        Ok(index)
    }
}

/// Scans every text-like column of `catalog` in the database at `path`.
pub fn build_index(
    path: &Path,
    catalog: &SchemaCatalog,
    params: LshParams,
) -> Result<ValueIndex, ValueIndexError> {
    let unreadable = |e: rusqlite::Error| ValueIndexError::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if !path.is_file() {
        return Err(ValueIndexError::Unreadable {
            path: path.display().to_string(),
            message: "no such file".into(),
        });
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(unreadable)?;
    let mut index = ValueIndex::new(catalog.db_id.clone(), params);
    for table in &catalog.tables {
        for column in &table.columns {
            if !matches!(column.data_type, DataType::Text | DataType::Other) {
                continue;
            }
            let sql = format!(
                "SELECT DISTINCT {col} FROM {tab} WHERE typeof({col}) = 'text' LIMIT {MAX_VALUES_PER_COLUMN}",
                col = quote_ident(&column.name),
                tab = quote_ident(&table.name),
            );
            let mut stmt = conn.prepare(&sql).map_err(unreadable)?;
            let values: Vec<String> = stmt
                .query_map([], |row| row.get(0))
                .map_err(unreadable)?
                .collect::<Result<_, _>>()
                .map_err(unreadable)?;
            for v in values {
                index.insert(&table.name, &column.name, &v);
            }
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ingest_from_database;

    fn opts() -> RetrieveOptions {
        RetrieveOptions::default()
    }

    #[test]
    fn indexability_filter() {
        assert!(is_indexable("US"));
        assert!(is_indexable("France"));
        assert!(is_indexable("Coca-Cola Co."));
        assert!(!is_indexable("0412-555-123"));
        assert!(!is_indexable("2003-01-01"));
        assert!(!is_indexable("   "));
        assert!(!is_indexable(&"a".repeat(65)));
        assert!(is_indexable(&"a".repeat(64)));
    }

    #[test]
    fn edit_similarity_by_hand() {
        assert!((edit_similarity("usa", "us") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(edit_similarity("zzzzzz", "germany"), 0.0);
        assert_eq!(edit_similarity("", ""), 1.0);
    }

    #[test]
    fn usa_finds_us() {
        let mut idx = ValueIndex::new("d", LshParams::default());
        idx.insert("c", "country", "US");
        idx.insert("c", "country", "France");
        let got = idx.retrieve("USA", &opts(), &NgramEmbedding).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].entry.value, "US");
        assert!((got[0].edit_similarity - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_first() {
        let mut idx = ValueIndex::new("d", LshParams::banded(32, 4));
        for v in ["France", "Francia", "Frankreich", "Spain"] {
            idx.insert("c", "name", v);
        }
        let got = idx.retrieve("  FRANCE ", &opts(), &NgramEmbedding).unwrap();
        assert_eq!(got[0].entry.value, "France");
        assert_eq!(got[0].edit_similarity, 1.0);
        assert_eq!(got[0].semantic_similarity, 1.0);
    }

    #[test]
    fn dissimilar_query_is_empty() {
        let mut idx = ValueIndex::new("d", LshParams::default());
        idx.insert("c", "name", "Germany");
        assert!(idx.retrieve("zzzzzz", &opts(), &NgramEmbedding).unwrap().is_empty());
    }

    #[test]
    fn build_skips_numeric_columns_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geo.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE c (id INTEGER, country TEXT, phone TEXT);
             INSERT INTO c VALUES (1, 'US', '0412-555-123'), (2, 'France', NULL), (3, 'US', '555');
             CREATE TABLE n (code INTEGER); INSERT INTO n VALUES (10);",
        )
        .unwrap();
        drop(conn);
        let catalog = ingest_from_database(&path).unwrap();
        let idx = build_index(&path, &catalog, LshParams::default()).unwrap();
        let mut values: Vec<&str> = idx.entries().iter().map(|e| e.value.as_str()).collect();
        values.sort();
        assert_eq!(values, vec!["France", "US"]);
        assert!(idx.entries().iter().all(|e| e.column == "country"));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = ValueIndex::new("d", LshParams::banded(32, 4));
        idx.set_source_hash("abc");
        for v in ["Nyx", "Ice Age", "Tempest"] {
            idx.insert("sets", "name", v);
        }
        let path = dir.path().join("values.idx");
        idx.save(&path).unwrap();
        let back = ValueIndex::load(&path).unwrap();
        assert_eq!(back.entries(), idx.entries());
        assert_eq!(back.params(), idx.params());
        assert_eq!(back.source_hash(), Some("abc"));
        let a = idx.retrieve("ice age", &opts(), &NgramEmbedding).unwrap();
        let b = back.retrieve("ice age", &opts(), &NgramEmbedding).unwrap();
        assert_eq!(a, b);

        std::fs::write(&path, "{\"format\":\"other\"}\n").unwrap();
        assert!(matches!(ValueIndex::load(&path), Err(ValueIndexError::Corrupt(_))));
    }
}
