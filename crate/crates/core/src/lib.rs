//! Annotation-free multi-label image classification.
//!
//! A vision-language encoder scores every image, and every snippet of a
//! grid split of it, against class prompts. The global and snippet scores
//! are fused into soft pseudo labels. A classifier is then trained against
//! them while the pseudo labels themselves are refined in turn.

pub mod aggregate;
pub mod alignment;
pub mod commands;
pub mod config;
pub mod embedding;
pub mod envelope;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod planted;
pub mod pseudo;
pub mod remote;
pub mod snippet;
pub mod trainer;

pub use error::{Error, Result};
