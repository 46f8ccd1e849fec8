//! Command-line driver: configuration, workdir artifacts and the staged
//! pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod workdir;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{Outcome, Pipeline, PipelineReport};
