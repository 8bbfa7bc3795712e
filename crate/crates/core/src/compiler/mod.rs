//! Lowers a decoder graph into per-module command stacks and a virtual
//! allocation manifest.

mod codegen;
mod graph;
mod layout;
mod table;

pub use codegen::*;
pub use graph::*;
pub use layout::*;
pub use table::*;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error("node {0} has no shape")]
    Unshaped(String),
    #[error("node {node} claimed by {roles:?}")]
    Ambiguous { node: String, roles: Vec<String> },
    #[error("graph lacks required roles: {0:?}")]
    Unmatched(Vec<String>),
    #[error("plan infeasible: {0}")]
    Infeasible(String),
    #[error("shape not mappable to row geometry: {0}")]
    Unmappable(String),
    #[error("module {module}: {what} needs {needed} bytes, budget is {budget}")]
    BudgetExceeded { module: u32, what: &'static str, needed: u64, budget: u64 },
}
