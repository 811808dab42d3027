//! Mutation corpora and precision/recall evaluation of adaptive wrappers.

use std::path::PathBuf;

use thiserror::Error;

pub mod corpus;
pub mod metrics;
pub mod mutate;
pub mod run;

pub use corpus::{generate_corpus, load_corpus, write_corpus, Case, CaseTruth, CorpusConfig, SCENARIOS};
pub use metrics::{compute_metrics, percent_half_up, EvalOutcome, Metrics, RawRatios};
pub use mutate::{mutate, GroundTruth, Mapped, Mutation, MutationOp, MutationSpec};
pub use run::{configured_wrapper, evaluate_case, expected_on_mutated, evaluate_corpus, evaluate_corpus_sequential, format_table, format_tables, EvalConfig, EvalReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}
