//! Evaluation harness for chain-of-note retrieval-augmented question answering.
//!
//! The pipeline runs corpus loading, golden-document labeling, noise mixtures,
//! prompt rendering, generation, note parsing, and scoring. A separate path
//! turns teacher-written notes into weighted-loss training records.

pub mod condition;
pub mod corpus;
pub mod error;
mod jsonl;
pub mod llm;
pub mod metrics;
pub mod noisemix;
pub mod notes;
pub mod prompt;
pub mod relevance;
pub mod runner;
pub mod traindata;

pub use error::{Error, Result};
