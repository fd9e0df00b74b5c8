//! Summarization pipeline with hallucination filtering, prompt-driven
//! refinement, a multi-metric scorecard and paired statistical tests.

pub mod backend;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod report;
pub mod stats;
pub mod summarize;
pub mod template;

pub use error::{Error, Result};
