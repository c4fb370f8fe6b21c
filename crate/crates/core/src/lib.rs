//! Depression screening from social-media post histories.

pub mod artifacts;
pub mod config;
pub mod criteria;
pub mod dataset;
pub mod digest;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod explain;
pub mod features;
pub mod gbt;
pub mod mood;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod symptom;
pub mod synth;
pub mod templates;

pub use error::{Error, Result};
pub use exec::Execution;
