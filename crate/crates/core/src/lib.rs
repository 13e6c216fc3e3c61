//! Active learning for sequence generation with multiple correct answers.
//!
//! The crate simulates pool-based active learning on a synthetic grounded
//! question-answering task whose answers come in paraphrase classes. It
//! ships the output-space acquisition baselines (least confidence, margin,
//! beam entropy) next to embedding-variance acquisition, which measures
//! Monte-Carlo dropout spread of the model's hidden state inside a learned
//! semantic space.

pub mod alloop;
pub mod embedspace;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod qamodel;
pub mod taskgen;
pub mod uncertainty;

pub use error::{Error, Result};
