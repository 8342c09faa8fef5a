//! Two-stage dual-encoder template retrieval and ranking for template-based
//! retrosynthesis, with a synthetic string-rewrite reaction engine.

pub mod baseline_classifier;
pub mod checkpoint;
pub mod cli;
pub mod curation;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod library;
pub mod objectives;
pub mod pipeline;
pub mod reaction_engine;
pub mod retrieval;
pub mod stability;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
