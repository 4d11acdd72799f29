//! Embedding-based retrieval for catalog search: corpus handling, training-set construction,
//! a two-tower encoder and its trainer, offline evaluation, and the serving pipeline.

pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod exec;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecMode;
