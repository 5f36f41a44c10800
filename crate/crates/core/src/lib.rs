//! Agentic text-to-SQL over large schemas.
//!
//! The schema is compressed, split into token-bounded chunks, and handed to
//! per-chunk view-generator agents that produce execution-validated CTE
//! views plus table/column selections. A planner, SQL generator and revisor
//! then compose the validated views into the final query.

pub mod catalog;
pub mod compress;
pub mod split;
pub mod values;
pub mod sql;
pub mod exec;
pub mod llm;
pub mod agents;
pub mod pipeline;
pub mod eval;
pub mod config;
pub mod artifacts;
pub mod runner;
pub mod toy;
