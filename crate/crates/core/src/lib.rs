//! Episodic in-context adaptation training.
//!
//! The pipeline samples a task, a query and `k` retrieved demonstrations,
//! renders them into one token sequence whose loss covers only the query
//! response, and updates low-rank adapters on a frozen toy backbone. A
//! synthetic multi-domain benchmark and the usual speech-task metrics
//! (capped utterance WER, CER, BLEU, QA accuracy) close the loop.

pub mod cli;
pub mod corpus;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synthbench;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
