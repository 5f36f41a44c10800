//! Pattern-based schema compression.
//!
//! Names are reduced to a skeleton by replacing every maximal run of two or
//! more digits with `{NUM}`. Tables with the same skeleton merge into one
//! table named by the skeleton when their ordered `(column, type)` lists,
//! primary keys, foreign-key participation and description skeletons all
//! agree. Inside each table, non-key columns with the same skeleton, type
//! and description skeleton merge the same way.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ColumnDef, ForeignKeyRef, SchemaCatalog, TableDef};

pub const NUM_PLACEHOLDER: &str = "{NUM}";

static DIGIT_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d{2,}").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("unknown name {0}")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Table,
    Column,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPattern {
    pub pattern: String,
    pub members: Vec<String>,
    pub kind: ClusterKind,
    /// Owning table (compressed name) for column clusters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

impl ClusterPattern {
    /// Key under which this cluster appears in the expansion map.
    pub fn key(&self) -> String {
        match &self.table {
            Some(t) => format!("{t}.{}", self.pattern),
            None => self.pattern.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedCatalog {
    pub catalog: SchemaCatalog,
    pub table_clusters: Vec<ClusterPattern>,
    pub column_clusters: Vec<ClusterPattern>,
    /// Table patterns map by pattern name; column patterns by `table.pattern`.
    pub expansion_map: BTreeMap<String, Vec<String>>,
}

/// Skeleton of a name, or `None` when it has no run of two or more digits.
pub fn name_skeleton(name: &str) -> Option<String> {
    if DIGIT_RUN.is_match(name) {
        Some(DIGIT_RUN.replace_all(name, NUM_PLACEHOLDER).into_owned())
    } else {
        None
    }
}

/// True when `name` equals `pattern` with each `{NUM}` replaced by a
/// maximal digit run of length two or more.
pub fn matches_pattern(pattern: &str, name: &str) -> bool {
    name_skeleton(name).as_deref() == Some(pattern)
}

fn text_skeleton(text: &Option<String>) -> Option<String> {
    text.as_ref()
        .map(|t| name_skeleton(t).unwrap_or_else(|| t.clone()))
}

#[derive(PartialEq, Eq, Hash)]
struct TableShape {
    columns: Vec<(String, crate::catalog::DataType)>,
    primary_key: Vec<String>,
    keys: Vec<(String, String, String, String)>,
    description: Option<String>,
}

const SELF: &str = "\u{0}self";

fn table_shape(catalog: &SchemaCatalog, table: &TableDef) -> TableShape {
    let own = |name: &str| {
        if name.eq_ignore_ascii_case(&table.name) {
            SELF.to_string()
        } else {
            name.to_lowercase()
        }
    };
    let mut keys: Vec<_> = catalog
        .relations
        .iter()
        .filter(|fk| fk.touches(&table.name))
        .map(|fk| {
            (
                own(&fk.child_table),
                fk.child_column.to_lowercase(),
                own(&fk.parent_table),
                fk.parent_column.to_lowercase(),
            )
        })
        .collect();
    keys.sort();
    TableShape {
        columns: table
            .columns
            .iter()
            .map(|c| (c.name.to_lowercase(), c.data_type))
            .collect(),
        primary_key: table.primary_key.iter().map(|k| k.to_lowercase()).collect(),
        keys,
        description: text_skeleton(&table.description),
    }
}

/// Groups item indices by skeleton and then by an equivalence key; returns,
/// per skeleton (in first-appearance order), the first subgroup with at
/// least two members whose pattern does not collide with an existing name.
fn pick_clusters<K: Eq + std::hash::Hash>(
    names: &[&str],
    eligible: impl Fn(usize) -> bool,
    key: impl Fn(usize) -> K,
) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_skeleton: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, name) in names.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        if let Some(sk) = name_skeleton(name) {
            by_skeleton
                .entry(sk.clone())
                .or_insert_with(|| {
                    order.push(sk);
                    Vec::new()
                })
                .push(i);
        }
    }
    let taken = |p: &str| names.iter().any(|n| n.eq_ignore_ascii_case(p));
    let mut out = Vec::new();
    for sk in order {
        if taken(&sk) {
            continue;
        }
        let idxs = &by_skeleton[&sk];
        let mut groups: Vec<(K, Vec<usize>)> = Vec::new();
        for &i in idxs {
            let k = key(i);
            match groups.iter_mut().find(|(gk, _)| *gk == k) {
                Some((_, g)) => g.push(i),
                None => groups.push((k, vec![i])),
            }
        }
        if let Some((_, g)) = groups.into_iter().find(|(_, g)| g.len() >= 2) {
            out.push((sk, g));
        }
    }
    out
}

pub fn compress_schema(catalog: &SchemaCatalog) -> CompressedCatalog {
    let names: Vec<&str> = catalog.tables.iter().map(|t| t.name.as_str()).collect();
    let shapes: Vec<TableShape> = catalog
        .tables
        .iter()
        .map(|t| table_shape(catalog, t))
        .collect();
    let clusters = pick_clusters(&names, |_| true, |i| &shapes[i]);

    // member index -> cluster id
    let mut member_of: HashMap<usize, usize> = HashMap::new();
    for (cid, (_, members)) in clusters.iter().enumerate() {
        for &m in members {
            member_of.insert(m, cid);
        }
    }
    let mut rename: HashMap<String, String> = HashMap::new();
    let mut tables = Vec::new();
    let mut table_clusters = Vec::new();
    for (i, table) in catalog.tables.iter().enumerate() {
        match member_of.get(&i) {
            None => tables.push(table.clone()),
            Some(&cid) => {
                let (pattern, members) = &clusters[cid];
                if members[0] != i {
                    continue;
                }
                let mut merged = table.clone();
                merged.name = pattern.clone();
                merged.description = text_skeleton(&table.description);
                merged.sample_rows = None;
                for &m in members {
                    rename.insert(catalog.tables[m].name.to_lowercase(), pattern.clone());
                }
                tables.push(merged);
                table_clusters.push(ClusterPattern {
                    pattern: pattern.clone(),
                    members: members.iter().map(|&m| catalog.tables[m].name.clone()).collect(),
                    kind: crate::compress::ClusterKind::Table,
                    table: None,
                });
            }
        }
    }

    let renamed = |name: &str| {
        rename
            .get(&name.to_lowercase())
            .cloned()
            .unwrap_or_else(|| name.to_string())
    };
    let mut relations: Vec<ForeignKeyRef> = Vec::new();
    for fk in &catalog.relations {
        let edge = ForeignKeyRef::new(
            renamed(&fk.child_table),
            fk.child_column.clone(),
            renamed(&fk.parent_table),
            fk.parent_column.clone(),
        );
        if !relations.contains(&edge) {
            relations.push(edge);
        }
    }

    let mut column_clusters = Vec::new();
    for table in &mut tables {
        let key_cols: Vec<String> = relations
            .iter()
            .flat_map(|fk| {
                let mut v = Vec::new();
                if fk.child_table.eq_ignore_ascii_case(&table.name) {
                    v.push(fk.child_column.to_lowercase());
                }
                if fk.parent_table.eq_ignore_ascii_case(&table.name) {
                    v.push(fk.parent_column.to_lowercase());
                }
                v
            })
            .chain(table.primary_key.iter().map(|k| k.to_lowercase()))
            .collect();
        let col_names: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
        let cols = &table.columns;
        let found = pick_clusters(
            &col_names,
            |i| !key_cols.contains(&cols[i].name.to_lowercase()),
            |i| (cols[i].data_type, text_skeleton(&cols[i].description)),
        );
        if found.is_empty() {
            continue;
        }
        let mut first_of: HashMap<usize, usize> = HashMap::new();
        let mut dropped: Vec<usize> = Vec::new();
        for (cid, (_, members)) in found.iter().enumerate() {
            first_of.insert(members[0], cid);
            dropped.extend(&members[1..]);
        }
        let mut new_cols: Vec<ColumnDef> = Vec::with_capacity(cols.len());
        for (i, col) in cols.iter().enumerate() {
            if dropped.contains(&i) {
                continue;
            }
            match first_of.get(&i) {
                Some(&cid) => {
                    let (pattern, members) = &found[cid];
                    new_cols.push(ColumnDef {
                        name: pattern.clone(),
                        data_type: col.data_type,
                        description: text_skeleton(&col.description),
                    });
                    column_clusters.push(ClusterPattern {
                        pattern: pattern.clone(),
                        members: members.iter().map(|&m| cols[m].name.clone()).collect(),
                        kind: ClusterKind::Column,
                        table: Some(table.name.clone()),
                    });
                }
                None => new_cols.push(col.clone()),
            }
        }
        table.columns = new_cols;
    }

    let expansion_map = table_clusters
        .iter()
        .chain(&column_clusters)
        .map(|c| (c.key(), c.members.clone()))
        .collect();

    CompressedCatalog {
        catalog: SchemaCatalog {
            db_id: catalog.db_id.clone(),
            tables,
            relations,
        },
        table_clusters,
        column_clusters,
        expansion_map,
    }
}

impl CompressedCatalog {
    /// Wraps an uncompressed catalog with empty cluster lists.
    pub fn identity(catalog: SchemaCatalog) -> Self {
        Self {
            catalog,
            table_clusters: Vec::new(),
            column_clusters: Vec::new(),
            expansion_map: BTreeMap::new(),
        }
    }

    /// Original table names behind a (possibly compressed) table name.
    pub fn expand_name(&self, name: &str) -> Result<Vec<String>, CompressError> {
        if let Some(c) = self
            .table_clusters
            .iter()
            .find(|c| c.pattern.eq_ignore_ascii_case(name))
        {
            return Ok(c.members.clone());
        }
        match self.catalog.table(name) {
            Some(t) => Ok(vec![t.name.clone()]),
            None => Err(CompressError::UnknownName(name.to_string())),
        }
    }

    /// Original column names behind a column of a compressed table.
    pub fn expand_column(&self, table: &str, column: &str) -> Result<Vec<String>, CompressError> {
        let def = self
            .canonical_table(table)
            .ok_or_else(|| CompressError::UnknownName(table.to_string()))?;
        if let Some(c) = self.column_clusters.iter().find(|c| {
            c.table.as_deref() == Some(def.name.as_str()) && c.pattern.eq_ignore_ascii_case(column)
        }) {
            return Ok(c.members.clone());
        }
        match def.column(column) {
            Some(c) => Ok(vec![c.name.clone()]),
            None => Err(CompressError::UnknownName(format!("{table}.{column}"))),
        }
    }

    /// Resolves a table name, accepting both compressed names and original
    /// member names of a table cluster.
    pub fn canonical_table(&self, name: &str) -> Option<&TableDef> {
        if let Some(t) = self.catalog.table(name) {
            return Some(t);
        }
        let cluster = self
            .table_clusters
            .iter()
            .find(|c| c.members.iter().any(|m| m.eq_ignore_ascii_case(name)))?;
        self.catalog.table(&cluster.pattern)
    }

    /// Resolves a column of a canonical table, accepting original member
    /// names of a column cluster.
    pub fn canonical_column<'a>(&'a self, table: &'a TableDef, column: &str) -> Option<&'a str> {
        if let Some(c) = table.column(column) {
            return Some(c.name.as_str());
        }
        let cluster = self.column_clusters.iter().find(|c| {
            c.table.as_deref() == Some(table.name.as_str())
                && c.members.iter().any(|m| m.eq_ignore_ascii_case(column))
        })?;
        table.column(&cluster.pattern).map(|c| c.name.as_str())
    }
}
