//! Self-repairing web wrappers.

pub mod dom;
pub mod par;
pub mod template;
pub mod treematch;
pub mod wrapper;
pub mod xpath;
pub mod engine;
pub mod repo;
pub mod eval;
pub mod cli;
