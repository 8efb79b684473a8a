//! Robustness toolkit for document-level dialogue translation.
//!
//! Builds perturbed, labeled training data from parallel dialogue documents,
//! trains a transformer with an auxiliary error-labeling head, decodes with
//! offline and online context policies, and scores the results.

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod perturb;
pub mod schedule;
pub mod synth;
pub mod tokenizer;

#[cfg(feature = "model")]
pub mod model;
#[cfg(feature = "model")]
pub mod checkpoint;
#[cfg(feature = "model")]
pub mod train;
#[cfg(feature = "model")]
pub mod decode;
#[cfg(feature = "model")]
pub mod experiment;

pub use error::{Error, Result};
