//! Reproduction pipeline: dataset generation, training, linearization, model
//! runs, comparisons, the depth study and report collation, one directory per
//! config hash.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, CliResult, ErrorKind};
pub use pipeline::Run;
