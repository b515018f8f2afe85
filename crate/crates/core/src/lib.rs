//! Ontology-grounded clinical phenotype extraction, patient knowledge graphs
//! and cohort-level phenotype analysis.

pub mod cohortstats;
pub mod corpus;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod fixtures;
pub mod jsonl;
pub mod kg;
pub mod llm;
pub mod ontology;
pub mod retrieval;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
