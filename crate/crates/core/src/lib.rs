//! Recall-prioritized AutoML for tabular binary malware classification.
//!
//! Labels are `0` for benign and `1` for malware throughout.

pub mod dataset;
pub mod error;
pub mod explain;
pub mod features;
pub mod hpo;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod profiler;
pub mod scorecard;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
