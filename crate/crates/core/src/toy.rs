//! A four-table shop database with five curated questions and a scripted
//! model that answers them. Used by the demo command and the end-to-end
//! tests; the script exercises view repair with value retrieval, SQL
//! repair and an editing revisor.

use std::path::Path;

use crate::eval::BenchmarkItem;
use crate::llm::{AgentRole, ScriptedBackend};

pub const DB_ID: &str = "toy_shop";
pub const SCHEMA_SQL: &str = include_str!("../fixtures/toy_shop.sql");
/// Chunk budget that splits the toy schema into more than one chunk.
pub const TOKEN_BUDGET: usize = 60;

/// Writes the toy database to `path`, replacing any existing file.
pub fn create_database(path: &Path) -> rusqlite::Result<()> {
    if path.exists() {
        let _ = std::fs::remove_file(path);
    }
    let conn = rusqlite::Connection::open(path)?;
    conn.execute_batch(SCHEMA_SQL)
}

struct Question {
    id: &'static str,
    question: &'static str,
    evidence: Option<&'static str>,
    gold: &'static str,
    difficulty: &'static str,
    task: &'static str,
    rewrite_rest: &'static str,
    /// (needle identifying the chunk, replies in order)
    views: &'static [(&'static str, &'static [&'static str])],
    sql: &'static [&'static str],
    revisor: &'static str,
}

const PLAN: &str = "```json\n{\"steps\": [\"read the validated views\", \"compose the final query\"], \"ctes_to_use\": [], \"tables_to_use\": [], \"output_columns\": []}\n```";
const IRRELEVANT: &str = "None of these tables bear on the question.\n```json\n{\"tables\": [], \"columns\": []}\n```";

const QUESTIONS: &[Question] = &[
    Question {
        id: "shop-1",
        question: "How many customers are from the USA?",
        evidence: None,
        gold: "SELECT COUNT(*) FROM customers WHERE country = 'US'",
        difficulty: "easy",
        task: "Count the customers located in the USA",
        rewrite_rest: "REQUIRED OUTPUTS:\n- number of customers\nFILTERS:\n- customer country is the USA\nSORTING/LIMIT: none",
        views: &[(
            "table(customers)",
            &[
                "Customers in the USA.\n```sql\nWITH usa_customers AS (SELECT id, name FROM customers WHERE country = 'USA')\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.id\", \"customers.name\"]}\n```",
                "The stored country code is 'US'.\n```sql\nWITH usa_customers AS (SELECT id, name, country FROM customers WHERE country = 'US')\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.id\", \"customers.name\", \"customers.country\"]}\n```",
            ],
        )],
        sql: &["```sql\nWITH usa_customers AS (SELECT id, name, country FROM customers WHERE country = 'US')\nSELECT COUNT(*) AS customer_count FROM usa_customers\n```"],
        revisor: "VERDICT: CORRECT",
    },
    Question {
        id: "shop-2",
        question: "What is the total quantity sold in each product category, largest first?",
        evidence: None,
        gold: "SELECT products.category, SUM(order_items.quantity) FROM order_items JOIN products ON products.id = order_items.product_id GROUP BY products.category ORDER BY 2 DESC",
        difficulty: "medium",
        task: "Total quantity sold per product category",
        rewrite_rest: "REQUIRED OUTPUTS:\n- category\n- total quantity\nFILTERS: none\nSORTING/LIMIT: total quantity descending",
        views: &[
            (
                "table(products)",
                &["Categories of products.\n```sql\nWITH product_categories AS (SELECT id, category FROM products)\n```\n```json\n{\"tables\": [\"products\"], \"columns\": [\"products.id\", \"products.category\"]}\n```"],
            ),
            (
                "table(order_items)",
                &["Units sold per product.\n```sql\nWITH units_per_product AS (SELECT product_id, SUM(quantity) AS units FROM order_items GROUP BY product_id)\n```\n```json\n{\"tables\": [\"order_items\"], \"columns\": [\"order_items.product_id\", \"order_items.quantity\"]}\n```"],
            ),
        ],
        sql: &["```sql\nSELECT p.category, SUM(oi.quantity) AS total_quantity\nFROM order_items AS oi JOIN products AS p ON p.id = oi.product_id\nGROUP BY p.category\nORDER BY total_quantity DESC\n```"],
        revisor: "VERDICT: CORRECT",
    },
    Question {
        id: "shop-3",
        question: "Which customers had a shipped order in 2023?",
        evidence: Some("shipped refers to status = 'shipped'; in 2023 means order_date starts with '2023'"),
        gold: "SELECT DISTINCT c.name FROM customers c JOIN orders o ON o.customer_id = c.id WHERE o.status = 'shipped' AND o.order_date LIKE '2023%'",
        difficulty: "medium",
        task: "Names of customers with a shipped order dated 2023",
        rewrite_rest: "REQUIRED OUTPUTS:\n- customer name\nFILTERS:\n- order status is 'shipped'\n- order date in 2023\nSORTING/LIMIT: none",
        views: &[
            (
                "table(orders)",
                &["Shipped orders from 2023.\n```sql\nWITH shipped_2023 AS (SELECT id, customer_id FROM orders WHERE status = 'shipped' AND order_date LIKE '2023%')\n```\n```json\n{\"tables\": [\"orders\"], \"columns\": [\"orders.id\", \"orders.customer_id\", \"orders.status\", \"orders.order_date\"]}\n```"],
            ),
            (
                "table(customers)",
                &["Customer names.\n```sql\nWITH customer_names AS (SELECT id, name FROM customers)\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.id\", \"customers.name\"]}\n```"],
            ),
        ],
        sql: &[
            "```sql\nSELECT DISTINCT c.name FROM customers AS c JOIN orders AS o ON o.customer_id = c.id WHERE o.state = 'shipped' AND o.order_date LIKE '2023%'\n```",
            "```sql\nSELECT DISTINCT c.name FROM customers AS c JOIN orders AS o ON o.customer_id = c.id WHERE o.status = 'shipped' AND o.order_date LIKE '2023%'\n```",
        ],
        revisor: "VERDICT: CORRECT",
    },
    Question {
        id: "shop-4",
        question: "What is the title of the most expensive product?",
        evidence: None,
        gold: "SELECT title FROM products ORDER BY price DESC LIMIT 1",
        difficulty: "easy",
        task: "Title of the product with the highest price",
        rewrite_rest: "REQUIRED OUTPUTS:\n- product title\nFILTERS: none\nSORTING/LIMIT: price descending, first row",
        views: &[(
            "table(products)",
            &["Products by price.\n```sql\nWITH priced AS (SELECT title, price FROM products)\n```\n```json\n{\"tables\": [\"products\"], \"columns\": [\"products.title\", \"products.price\"]}\n```"],
        )],
        sql: &["```sql\nSELECT title, price FROM products ORDER BY price DESC LIMIT 1\n```"],
        revisor: "VERDICT: REVISED\nOnly the title was asked for.\n```sql\nSELECT title FROM products ORDER BY price DESC LIMIT 1\n```",
    },
    Question {
        id: "shop-5",
        question: "How many orders were placed by customers from each country?",
        evidence: None,
        gold: "SELECT c.country, COUNT(o.id) FROM customers c JOIN orders o ON o.customer_id = c.id GROUP BY c.country",
        difficulty: "hard",
        task: "Number of orders per customer country",
        rewrite_rest: "REQUIRED OUTPUTS:\n- country\n- number of orders\nFILTERS: none\nSORTING/LIMIT: none",
        views: &[
            (
                "table(orders)",
                &["Orders per customer.\n```sql\nWITH orders_per_customer AS (SELECT customer_id, COUNT(*) AS n FROM orders GROUP BY customer_id)\n```\n```json\n{\"tables\": [\"orders\"], \"columns\": [\"orders.customer_id\"]}\n```"],
            ),
            (
                "table(customers)",
                &["Customer countries.\n```sql\nWITH customer_country AS (SELECT id, country FROM customers)\n```\n```json\n{\"tables\": [\"customers\"], \"columns\": [\"customers.id\", \"customers.country\"]}\n```"],
            ),
        ],
        sql: &["```sql\nSELECT c.country, COUNT(*) AS orders FROM orders AS o JOIN customers AS c ON c.id = o.customer_id GROUP BY c.country\n```"],
        revisor: "VERDICT: CORRECT",
    },
];

/// The curated questions with gold SQL.
pub fn items() -> Vec<BenchmarkItem> {
    QUESTIONS
        .iter()
        .map(|q| BenchmarkItem {
            question_id: q.id.into(),
            db_id: DB_ID.into(),
            question: q.question.into(),
            evidence: q.evidence.map(str::to_string),
            gold_sql: q.gold.into(),
            difficulty: Some(q.difficulty.into()),
        })
        .collect()
}

/// A scripted model answering every toy question. Chunks a question does
/// not need are declared irrelevant.
pub fn scripted_backend() -> ScriptedBackend {
    let mut s = ScriptedBackend::new();
    for q in QUESTIONS {
        let rewrite = format!("TASK: {}\n{}", q.task, q.rewrite_rest);
        s = s.on_containing(AgentRole::Rewriter, q.question, &[&rewrite]);
        for (chunk_needle, replies) in q.views {
            s = s.on_all(AgentRole::ViewGenerator, &[q.task, chunk_needle], replies);
        }
        s = s
            .on_containing(AgentRole::ViewGenerator, q.task, &[IRRELEVANT])
            .on_containing(AgentRole::Planner, q.task, &[PLAN])
            .on_containing(AgentRole::SqlGenerator, q.task, q.sql)
            .on_containing(AgentRole::Revisor, q.task, &[q.revisor]);
    }
    s
}
