//! Deterministic task-based data pipelines for sequence-model training.
//!
//! Tasks bind a raw source, preprocessing and metrics; an offline build
//! turns a task split into a globally shuffled, modulo-sharded cache; the
//! reader serves byte-reproducible, resumable, data-parallel streams from
//! those caches, optionally mixed across tasks and converted into model
//! features.

pub mod builder;
pub mod cli;
pub mod converter;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod preprocess;
pub mod prf;
pub mod reader;
pub mod registry;
pub mod shard_store;
pub mod task;
pub mod vocab;

pub use error::{Error, Result};
