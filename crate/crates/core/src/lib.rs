//! Paraphrase-consistency probing for masked language models.
//!
//! The crate is organised around the probing pipeline:
//!
//! - [`resource`]: pattern resources, KB tuples, cloze population and the
//!   synthetic KB generator.
//! - [`scorer`]: the uniform scoring interface, the built-in toy masked LM,
//!   the majority baseline and the JSON-lines bridge client.
//! - [`metrics`]: consistency, accuracy, extractability and determinism.
//! - [`trainer`]: consistency-regularized continued training of the toy MLM.
//! - [`analysis`]: k-means, V-measure, rank correlation and McNemar's test.
//! - [`probe`] and [`report`]: running a scorer over a suite and emitting
//!   reproducible reports.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod resource;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
