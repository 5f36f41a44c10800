//! Token-budgeted schema partitioning.

use serde::{Deserialize, Serialize};

use crate::catalog::{
    serialize_tables, ByteEstimator, DetailLevel, ForeignKeyRef, SchemaCatalog, TableDef,
    TokenEstimator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Greedy sequential packing of whole tables under the budget.
    #[default]
    LengthPacked,
    OnePerTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaChunk {
    /// 1-based position in the partition.
    pub index: usize,
    pub tables: Vec<TableDef>,
    pub relations: Vec<ForeignKeyRef>,
    pub token_estimate: usize,
    /// Set when a single table alone reaches the budget.
    #[serde(default)]
    pub oversize: bool,
}

impl SchemaChunk {
    pub fn serialize(&self, detail: DetailLevel) -> String {
        serialize_tables(&self.tables, &self.relations, detail)
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaPartition {
    pub budget: usize,
    pub chunks: Vec<SchemaChunk>,
}

pub fn split_schema(catalog: &SchemaCatalog, budget: usize) -> SchemaPartition {
    split_with(catalog, budget, SplitStrategy::LengthPacked, &ByteEstimator)
}

pub fn split_with(
    catalog: &SchemaCatalog,
    budget: usize,
    strategy: SplitStrategy,
    estimator: &dyn TokenEstimator,
) -> SchemaPartition {
    assert!(budget > 0, "token budget must be positive");
    let measure = |tables: &[TableDef]| {
        let rels = catalog.relations_within(tables);
        let est = estimator.estimate(&serialize_tables(tables, &rels, DetailLevel::Full));
        (rels, est)
    };

    let mut groups: Vec<Vec<TableDef>> = Vec::new();
    let mut current: Vec<TableDef> = Vec::new();
    for table in &catalog.tables {
        if strategy == SplitStrategy::OnePerTable {
            groups.push(vec![table.clone()]);
            continue;
        }
        current.push(table.clone());
        if current.len() > 1 && measure(&current).1 >= budget {
            let last = current.pop().expect("just pushed");
            groups.push(std::mem::take(&mut current));
            current.push(last);
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let chunks = groups
        .into_iter()
        .enumerate()
        .map(|(i, tables)| {
            let (relations, token_estimate) = measure(&tables);
            SchemaChunk {
                index: i + 1,
                oversize: token_estimate >= budget,
                tables,
                relations,
                token_estimate,
            }
        })
        .collect();
    SchemaPartition { budget, chunks }
}
