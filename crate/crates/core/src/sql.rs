//! SQL parsing, literal extraction and table/column reference resolution.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, Expr, GroupByExpr, Ident, JoinConstraint, JoinOperator, ObjectName,
    ObjectNamePart, OrderByKind, Query, Select, SelectItem, SelectItemQualifiedWildcardKind,
    SetExpr, Statement, TableFactor, TableWithJoins, Value, Visit, Visitor,
};
use sqlparser::dialect::{Dialect, GenericDialect, SQLiteDialect, SnowflakeDialect};
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::catalog::SchemaCatalog;
use crate::compress::{CompressedCatalog, NUM_PLACEHOLDER};

/// Stand-in for the compression placeholder, which is not a legal identifier.
const NUM_TOKEN: &str = "__viewsql_num__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqlDialect {
    Generic,
    #[default]
    Sqlite,
    Snowflake,
}

impl SqlDialect {
    fn parser_dialect(self) -> Box<dyn Dialect> {
        match self {
            SqlDialect::Generic => Box::new(GenericDialect {}),
            SqlDialect::Sqlite => Box::new(SQLiteDialect {}),
            SqlDialect::Snowflake => Box::new(SnowflakeDialect {}),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SqlDialect::Generic => "generic",
            SqlDialect::Sqlite => "sqlite",
            SqlDialect::Snowflake => "snowflake",
        }
    }
}

impl fmt::Display for SqlDialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SqlDialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "generic" => Ok(SqlDialect::Generic),
            "sqlite" => Ok(SqlDialect::Sqlite),
            "snowflake" => Ok(SqlDialect::Snowflake),
            other => Err(format!("unknown dialect {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlError {
    /// The parser message is kept verbatim; it is fed back to agents.
    #[error("syntax error: {message}")]
    Syntax {
        message: String,
        line: Option<u64>,
        column: Option<u64>,
    },
    #[error("unresolved column {name}: {reason}")]
    Unresolved { name: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct SqlProgram {
    pub raw_text: String,
    pub dialect: SqlDialect,
    pub statements: Vec<Statement>,
    pub cte_names: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub tables: BTreeSet<String>,
    /// Qualified `table.column` names.
    pub columns: BTreeSet<String>,
}

impl ReferenceSet {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.columns.is_empty()
    }
}

static POSITION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Line: (\d+), Column: (\d+)").expect("static regex"));

fn protect(text: &str) -> String {
    text.replace(NUM_PLACEHOLDER, NUM_TOKEN)
}

fn restore(text: &str) -> String {
    text.replace(NUM_TOKEN, NUM_PLACEHOLDER)
}

pub fn parse(sql_text: &str, dialect: SqlDialect) -> Result<SqlProgram, SqlError> {
    let protected = protect(sql_text);
    let statements = Parser::parse_sql(dialect.parser_dialect().as_ref(), &protected).map_err(|e| {
        let message = restore(
            e.to_string()
                .trim_start_matches("sql parser error: ")
                .trim(),
        );
        let (line, column) = POSITION
            .captures(&message)
            .map(|c| (c[1].parse().ok(), c[2].parse().ok()))
            .unwrap_or((None, None));
        SqlError::Syntax {
            message,
            line,
            column,
        }
    })?;
    if statements.is_empty() {
        return Err(SqlError::Syntax {
            message: "empty SQL text".into(),
            line: None,
            column: None,
        });
    }
    let cte_names = statements
        .iter()
        .filter_map(|s| match s {
            Statement::Query(q) => q.with.as_ref(),
            _ => None,
        })
        .flat_map(|w| w.cte_tables.iter().map(|c| restore(&c.alias.name.value)))
        .collect();
    Ok(SqlProgram {
        raw_text: sql_text.to_string(),
        dialect,
        statements,
        cte_names,
    })
}

/// Canonical text of the program, statements joined by `;`.
pub fn render(program: &SqlProgram) -> String {
    restore(
        &program
            .statements
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";\n"),
    )
}

impl SqlProgram {
    /// True when every statement is a query (SELECT or WITH).
    pub fn is_read_only(&self) -> bool {
        self.statements.iter().all(|s| matches!(s, Statement::Query(_)))
    }

    /// Whether the first statement has an ORDER BY on its outermost query.
    pub fn has_top_level_order_by(&self) -> bool {
        match self.statements.first() {
            Some(Statement::Query(q)) => q.order_by.is_some(),
            _ => false,
        }
    }

    /// `(name, body)` for every CTE of the top-level WITH clauses.
    pub fn cte_definitions(&self) -> Vec<(String, String)> {
        self.statements
            .iter()
            .filter_map(|s| match s {
                Statement::Query(q) => q.with.as_ref(),
                _ => None,
            })
            .flat_map(|w| {
                w.cte_tables
                    .iter()
                    .map(|c| (restore(&c.alias.name.value), restore(&c.query.to_string())))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Literals

static NUMERIC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\s*$").expect("static regex"));
static DATE_LIKE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(\d{4}[-/]\d{1,2}([-/]\d{1,2})?([ T]\d{1,2}:\d{2}(:\d{2}(\.\d+)?)?)?|\d{1,2}[-/]\d{1,2}[-/]\d{2,4}|\d{1,2}:\d{2}(:\d{2})?)\s*$")
        .expect("static regex")
});

/// Numeric- or date-shaped strings are not useful for value retrieval.
pub fn is_retrievable_literal(text: &str) -> bool {
    !text.trim().is_empty() && !NUMERIC.is_match(text) && !DATE_LIKE.is_match(text)
}

fn string_value(expr: &Expr) -> Option<&str> {
    match expr {
        Expr::Value(v) => match &v.value {
            Value::SingleQuotedString(s)
            | Value::EscapedStringLiteral(s)
            | Value::NationalStringLiteral(s)
            | Value::TripleSingleQuotedString(s) => Some(s.as_str()),
            _ => None,
        },
        Expr::Nested(inner) => string_value(inner),
        _ => None,
    }
}

struct LiteralCollector {
    out: Vec<String>,
}

impl LiteralCollector {
    fn take(&mut self, expr: &Expr) {
        if let Some(s) = string_value(expr) {
            if is_retrievable_literal(s) {
                self.out.push(restore(s));
            }
        }
    }
}

impl Visitor for LiteralCollector {
    type Break = ();

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        match expr {
            Expr::BinaryOp { left, op, right } => {
                if matches!(
                    op,
                    BinaryOperator::Eq
                        | BinaryOperator::NotEq
                        | BinaryOperator::Lt
                        | BinaryOperator::LtEq
                        | BinaryOperator::Gt
                        | BinaryOperator::GtEq
                ) {
                    self.take(left);
                    self.take(right);
                }
            }
            Expr::Like { pattern, .. }
            | Expr::ILike { pattern, .. }
            | Expr::SimilarTo { pattern, .. } => self.take(pattern),
            Expr::InList { list, .. } => list.iter().for_each(|e| self.take(e)),
            Expr::Between { low, high, .. } => {
                self.take(low);
                self.take(high);
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

/// String literals in predicate positions (comparisons, LIKE patterns, IN
/// lists, BETWEEN bounds), in document order with duplicates kept.
/// Numeric-looking and date-looking strings are dropped.
pub fn extract_literals(program: &SqlProgram) -> Vec<String> {
    let mut c = LiteralCollector { out: Vec::new() };
    for s in &program.statements {
        let _ = s.visit(&mut c);
    }
    c.out
}

// ---------------------------------------------------------------------------
// References

/// Name resolution against a schema.
pub trait SchemaLookup {
    /// Canonical table name, if the table exists.
    fn resolve_table(&self, name: &str) -> Option<String>;
    /// Canonical column name of a canonical table, if it exists.
    fn resolve_column(&self, table: &str, column: &str) -> Option<String>;
    /// All columns of a canonical table, in declaration order.
    fn columns_of(&self, table: &str) -> Vec<String>;
}

impl SchemaLookup for SchemaCatalog {
    fn resolve_table(&self, name: &str) -> Option<String> {
        self.table(name).map(|t| t.name.clone())
    }

    fn resolve_column(&self, table: &str, column: &str) -> Option<String> {
        self.table(table)?.column(column).map(|c| c.name.clone())
    }

    fn columns_of(&self, table: &str) -> Vec<String> {
        self.table(table)
            .map(|t| t.columns.iter().map(|c| c.name.clone()).collect())
            .unwrap_or_default()
    }
}

impl SchemaLookup for CompressedCatalog {
    fn resolve_table(&self, name: &str) -> Option<String> {
        self.canonical_table(name).map(|t| t.name.clone())
    }

    fn resolve_column(&self, table: &str, column: &str) -> Option<String> {
        let def = self.canonical_table(table)?;
        self.canonical_column(def, column).map(str::to_string)
    }

    fn columns_of(&self, table: &str) -> Vec<String> {
        self.catalog.columns_of(table)
    }
}

#[derive(Debug, Clone)]
enum RelKind {
    /// A schema table; `known` is false when the catalog lacks it.
    Base { table: String, known: bool },
    /// A CTE or derived table. `None` columns means unknown (recursive CTE).
    Derived { columns: Option<Vec<String>> },
}

#[derive(Debug, Clone)]
struct Rel {
    binding: String,
    kind: RelKind,
}

#[derive(Debug, Default)]
struct Scope<'p> {
    rels: Vec<Rel>,
    aliases: Vec<String>,
    parent: Option<&'p Scope<'p>>,
}

type Env = HashMap<String, Option<Vec<String>>>;

fn ident_name(ident: &Ident) -> String {
    restore(&ident.value)
}

fn object_parts(name: &ObjectName) -> Vec<String> {
    name.0
        .iter()
        .map(|p| match p {
            ObjectNamePart::Identifier(i) => ident_name(i),
            other => restore(&other.to_string()),
        })
        .collect()
}

fn eq_ci(a: &str, b: &str) -> bool {
    a.eq_ignore_ascii_case(b)
}

/// Identifiers and nested queries of one expression, skipping anything
/// inside the nested queries themselves.
#[derive(Default)]
struct ExprParts {
    depth: usize,
    idents: Vec<Vec<Ident>>,
    queries: Vec<Query>,
}

impl Visitor for ExprParts {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if self.depth == 0 {
            self.queries.push(query.clone());
        }
        self.depth += 1;
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _query: &Query) -> ControlFlow<()> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if self.depth == 0 {
            match expr {
                Expr::Identifier(i) => self.idents.push(vec![i.clone()]),
                Expr::CompoundIdentifier(parts) => self.idents.push(parts.clone()),
                _ => {}
            }
        }
        ControlFlow::Continue(())
    }
}

struct Resolver<'a> {
    lookup: &'a dyn SchemaLookup,
    dialect: SqlDialect,
    refs: ReferenceSet,
}

impl Resolver<'_> {
    fn rel_has_column(&self, rel: &Rel, column: &str) -> bool {
        match &rel.kind {
            RelKind::Base { table, known: true } => self.lookup.resolve_column(table, column).is_some(),
            RelKind::Base { known: false, .. } => false,
            RelKind::Derived { columns } => columns
                .as_ref()
                .is_some_and(|cs| cs.iter().any(|c| eq_ci(c, column))),
        }
    }

    fn add_column(&mut self, table: &str, known: bool, column: &str) {
        let column = if known {
            self.lookup
                .resolve_column(table, column)
                .unwrap_or_else(|| column.to_string())
        } else {
            column.to_string()
        };
        self.refs.columns.insert(format!("{table}.{column}"));
    }

    fn attribute(&mut self, rel: &Rel, column: &str) {
        if let RelKind::Base { table, known } = &rel.kind {
            let (table, known) = (table.clone(), *known);
            self.add_column(&table, known, column);
        }
    }

    fn resolve_ident(&mut self, parts: &[Ident], scope: &Scope) -> Result<(), SqlError> {
        let names: Vec<String> = parts.iter().map(ident_name).collect();
        let column = names.last().expect("identifier has parts").clone();
        if names.len() >= 2 {
            let qualifier = &names[names.len() - 2];
            let mut s = Some(scope);
            while let Some(sc) = s {
                if let Some(rel) = sc.rels.iter().rev().find(|r| eq_ci(&r.binding, qualifier)) {
                    let rel = rel.clone();
                    self.attribute(&rel, &column);
                    return Ok(());
                }
                s = sc.parent;
            }
            return Err(SqlError::Unresolved {
                name: names.join("."),
                reason: format!("no table or alias named {qualifier} in scope"),
            });
        }

        let mut s = Some(scope);
        while let Some(sc) = s {
            let owners: Vec<&Rel> = sc.rels.iter().filter(|r| self.rel_has_column(r, &column)).collect();
            match owners.len() {
                1 => {
                    let rel = owners[0].clone();
                    self.attribute(&rel, &column);
                    return Ok(());
                }
                n if n > 1 => {
                    return Err(SqlError::Unresolved {
                        name: column,
                        reason: format!(
                            "ambiguous between {}",
                            owners.iter().map(|r| r.binding.as_str()).collect::<Vec<_>>().join(", ")
                        ),
                    })
                }
                _ => {}
            }
            if sc.aliases.iter().any(|a| eq_ci(a, &column)) {
                return Ok(());
            }
            s = sc.parent;
        }
        // SQLite reads an unresolvable double-quoted identifier as a string.
        if self.dialect == SqlDialect::Sqlite && parts[0].quote_style == Some('"') {
            return Ok(());
        }
        if let [only] = scope.rels.as_slice() {
            match &only.kind {
                RelKind::Base { .. } | RelKind::Derived { columns: None } => {
                    let rel = only.clone();
                    self.attribute(&rel, &column);
                    return Ok(());
                }
                RelKind::Derived { .. } => {}
            }
        }
        Err(SqlError::Unresolved {
            name: column,
            reason: "no table in scope has this column".into(),
        })
    }

    fn resolve_expr(&mut self, expr: &Expr, scope: &Scope, env: &Env) -> Result<(), SqlError> {
        let mut parts = ExprParts::default();
        let _ = expr.visit(&mut parts);
        for ident in &parts.idents {
            self.resolve_ident(ident, scope)?;
        }
        for q in &parts.queries {
            self.resolve_query(q, env, Some(scope))?;
        }
        Ok(())
    }

    fn rel_columns(&self, rel: &Rel) -> Vec<String> {
        match &rel.kind {
            RelKind::Base { table, known: true } => self.lookup.columns_of(table),
            RelKind::Base { known: false, .. } => Vec::new(),
            RelKind::Derived { columns } => columns.clone().unwrap_or_default(),
        }
    }

    fn star(&mut self, rels: &[Rel]) -> Vec<String> {
        let mut out = Vec::new();
        for rel in rels {
            let cols = self.rel_columns(rel);
            for c in &cols {
                self.attribute(rel, c);
            }
            out.extend(cols);
        }
        out
    }

    /// Resolves a query and returns its output column names.
    fn resolve_query(&mut self, q: &Query, env: &Env, outer: Option<&Scope>) -> Result<Vec<String>, SqlError> {
        let mut env = env.clone();
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                let name = ident_name(&cte.alias.name).to_lowercase();
                let declared: Vec<String> = cte.alias.columns.iter().map(|c| ident_name(&c.name)).collect();
                if with.recursive {
                    env.insert(name.clone(), (!declared.is_empty()).then(|| declared.clone()));
                }
                let produced = self.resolve_query(&cte.query, &env, outer)?;
                env.insert(name, Some(if declared.is_empty() { produced } else { declared }));
            }
        }
        let order_by: Vec<&Expr> = match &q.order_by {
            Some(ob) => match &ob.kind {
                OrderByKind::Expressions(items) => items.iter().map(|o| &o.expr).collect(),
                OrderByKind::All(_) => Vec::new(),
            },
            None => Vec::new(),
        };
        self.resolve_set_expr(&q.body, &env, outer, &order_by)
    }

    fn resolve_set_expr(
        &mut self,
        body: &SetExpr,
        env: &Env,
        outer: Option<&Scope>,
        order_by: &[&Expr],
    ) -> Result<Vec<String>, SqlError> {
        match body {
            SetExpr::Select(select) => self.resolve_select(select, env, outer, order_by),
            SetExpr::Query(q) => {
                let cols = self.resolve_query(q, env, outer)?;
                self.resolve_output_order(order_by, &cols, env, outer)?;
                Ok(cols)
            }
            SetExpr::SetOperation { left, right, .. } => {
                let cols = self.resolve_set_expr(left, env, outer, &[])?;
                self.resolve_set_expr(right, env, outer, &[])?;
                self.resolve_output_order(order_by, &cols, env, outer)?;
                Ok(cols)
            }
            SetExpr::Values(values) => {
                let scope = Scope { parent: outer, ..Scope::default() };
                for row in &values.rows {
                    for e in &row.content {
                        self.resolve_expr(e, &scope, env)?;
                    }
                }
                let width = values.rows.first().map_or(0, |r| r.content.len());
                Ok((1..=width).map(|i| format!("column{i}")).collect())
            }
            SetExpr::Table(t) => {
                let name = t.table_name.clone().unwrap_or_default();
                let rel = self.relation_for(&[name], None, env);
                Ok(self.rel_columns(&rel))
            }
            _ => Ok(Vec::new()),
        }
    }

    /// ORDER BY over a set operation may only name output columns.
    fn resolve_output_order(
        &mut self,
        order_by: &[&Expr],
        cols: &[String],
        env: &Env,
        outer: Option<&Scope>,
    ) -> Result<(), SqlError> {
        let scope = Scope {
            rels: vec![Rel {
                binding: String::new(),
                kind: RelKind::Derived { columns: Some(cols.to_vec()) },
            }],
            aliases: cols.to_vec(),
            parent: outer,
        };
        for e in order_by {
            self.resolve_expr(e, &scope, env)?;
        }
        Ok(())
    }

    fn relation_for(&mut self, parts: &[String], alias: Option<&Ident>, env: &Env) -> Rel {
        let written = parts.last().cloned().unwrap_or_default();
        let binding = alias.map(ident_name).unwrap_or_else(|| written.clone());
        if parts.len() == 1 {
            if let Some(cols) = env.get(&written.to_lowercase()) {
                return Rel {
                    binding,
                    kind: RelKind::Derived { columns: cols.clone() },
                };
            }
        }
        let (table, known) = match self.lookup.resolve_table(&written) {
            Some(t) => (t, true),
            None => (written.clone(), false),
        };
        self.refs.tables.insert(table.clone());
        Rel {
            binding,
            kind: RelKind::Base { table, known },
        }
    }

    fn add_factor(
        &mut self,
        factor: &TableFactor,
        env: &Env,
        outer: Option<&Scope>,
        rels: &mut Vec<Rel>,
    ) -> Result<(), SqlError> {
        match factor {
            TableFactor::Table { name, alias, .. } => {
                let rel = self.relation_for(&object_parts(name), alias.as_ref().map(|a| &a.name), env);
                rels.push(rel);
            }
            TableFactor::Derived { subquery, alias, .. } => {
                let mut cols = self.resolve_query(subquery, env, outer)?;
                if let Some(a) = alias {
                    if !a.columns.is_empty() {
                        cols = a.columns.iter().map(|c| ident_name(&c.name)).collect();
                    }
                }
                rels.push(Rel {
                    binding: alias.as_ref().map(|a| ident_name(&a.name)).unwrap_or_default(),
                    kind: RelKind::Derived { columns: Some(cols) },
                });
            }
            TableFactor::NestedJoin { table_with_joins, .. } => {
                self.add_from(std::slice::from_ref(table_with_joins.as_ref()), env, outer, rels)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn add_from(
        &mut self,
        from: &[TableWithJoins],
        env: &Env,
        outer: Option<&Scope>,
        rels: &mut Vec<Rel>,
    ) -> Result<(), SqlError> {
        for twj in from {
            self.add_factor(&twj.relation, env, outer, rels)?;
            for join in &twj.joins {
                self.add_factor(&join.relation, env, outer, rels)?;
            }
        }
        Ok(())
    }

    fn resolve_select(
        &mut self,
        select: &Select,
        env: &Env,
        outer: Option<&Scope>,
        order_by: &[&Expr],
    ) -> Result<Vec<String>, SqlError> {
        let mut rels = Vec::new();
        self.add_from(&select.from, env, outer, &mut rels)?;
        let aliases = select
            .projection
            .iter()
            .filter_map(|item| match item {
                SelectItem::ExprWithAlias { alias, .. } => Some(ident_name(alias)),
                _ => None,
            })
            .collect();
        let scope = Scope { rels, aliases, parent: outer };

        for twj in &select.from {
            for join in &twj.joins {
                match join_constraint(&join.join_operator) {
                    Some(JoinConstraint::On(e)) => self.resolve_expr(e, &scope, env)?,
                    Some(JoinConstraint::Using(cols)) => {
                        for c in cols {
                            let column = object_parts(c).pop().unwrap_or_default();
                            for rel in scope.rels.clone() {
                                if self.rel_has_column(&rel, &column) {
                                    self.attribute(&rel, &column);
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
        }

        let mut outputs = Vec::new();
        for item in &select.projection {
            match item {
                SelectItem::UnnamedExpr(e) => {
                    self.resolve_expr(e, &scope, env)?;
                    outputs.push(output_name(e));
                }
                SelectItem::ExprWithAlias { expr, alias } => {
                    self.resolve_expr(expr, &scope, env)?;
                    outputs.push(ident_name(alias));
                }
                SelectItem::ExprWithAliases { expr, aliases } => {
                    self.resolve_expr(expr, &scope, env)?;
                    outputs.extend(aliases.iter().map(ident_name));
                }
                SelectItem::Wildcard(_) => {
                    let rels = scope.rels.clone();
                    outputs.extend(self.star(&rels));
                }
                SelectItem::QualifiedWildcard(kind, _) => match kind {
                    SelectItemQualifiedWildcardKind::ObjectName(name) => {
                        let qualifier = object_parts(name).pop().unwrap_or_default();
                        let rel = scope
                            .rels
                            .iter()
                            .find(|r| eq_ci(&r.binding, &qualifier))
                            .cloned()
                            .ok_or_else(|| SqlError::Unresolved {
                                name: format!("{qualifier}.*"),
                                reason: format!("no table or alias named {qualifier} in scope"),
                            })?;
                        outputs.extend(self.star(std::slice::from_ref(&rel)));
                    }
                    SelectItemQualifiedWildcardKind::Expr(e) => self.resolve_expr(e, &scope, env)?,
                },
            }
        }

        let mut clauses: Vec<&Expr> = Vec::new();
        clauses.extend(select.selection.as_ref());
        if let GroupByExpr::Expressions(exprs, _) = &select.group_by {
            clauses.extend(exprs.iter());
        }
        clauses.extend(select.having.as_ref());
        clauses.extend(select.qualify.as_ref());
        clauses.extend(order_by.iter().copied());
        for e in clauses {
            self.resolve_expr(e, &scope, env)?;
        }
        Ok(outputs)
    }
}

fn join_constraint(op: &JoinOperator) -> Option<&JoinConstraint> {
    match op {
        JoinOperator::Join(c)
        | JoinOperator::Inner(c)
        | JoinOperator::Left(c)
        | JoinOperator::LeftOuter(c)
        | JoinOperator::Right(c)
        | JoinOperator::RightOuter(c)
        | JoinOperator::FullOuter(c)
        | JoinOperator::CrossJoin(c)
        | JoinOperator::Semi(c)
        | JoinOperator::LeftSemi(c)
        | JoinOperator::RightSemi(c)
        | JoinOperator::Anti(c)
        | JoinOperator::LeftAnti(c)
        | JoinOperator::RightAnti(c)
        | JoinOperator::StraightJoin(c) => Some(c),
        JoinOperator::AsOf { constraint, .. } => Some(constraint),
        _ => None,
    }
}

fn output_name(expr: &Expr) -> String {
    match expr {
        Expr::Identifier(i) => ident_name(i),
        Expr::CompoundIdentifier(parts) => parts.last().map(ident_name).unwrap_or_default(),
        other => restore(&other.to_string()),
    }
}

/// Base tables and qualified columns a program reads. CTE names and
/// CTE-internal columns are excluded; `*` expands to base-table columns.
pub fn extract_references(program: &SqlProgram, lookup: &dyn SchemaLookup) -> Result<ReferenceSet, SqlError> {
    let mut r = Resolver {
        lookup,
        dialect: program.dialect,
        refs: ReferenceSet::default(),
    };
    for s in &program.statements {
        if let Statement::Query(q) = s {
            r.resolve_query(q, &Env::new(), None)?;
        }
    }
    Ok(r.refs)
}

/// Linking errors for references absent from the schema. Columns of an
/// unknown table are not reported separately.
pub fn validate_references(refs: &ReferenceSet, lookup: &dyn SchemaLookup) -> Vec<String> {
    let mut errors = Vec::new();
    let mut unknown_tables = BTreeSet::new();
    for t in &refs.tables {
        if lookup.resolve_table(t).is_none() {
            errors.push(format!("unknown table {t}"));
            unknown_tables.insert(t.to_lowercase());
        }
    }
    for c in &refs.columns {
        let Some((table, column)) = c.split_once('.') else {
            errors.push(format!("unknown column {c}"));
            continue;
        };
        if unknown_tables.contains(&table.to_lowercase()) {
            continue;
        }
        match lookup.resolve_table(table) {
            None => errors.push(format!("unknown table {table}")),
            Some(t) if lookup.resolve_column(&t, column).is_none() => {
                errors.push(format!("unknown column {c}"))
            }
            Some(_) => {}
        }
    }
    errors
}
