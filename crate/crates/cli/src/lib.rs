//! Command-line driver: stage definitions, pipeline execution and manifests.

pub mod cli;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use cli::run_cli;
pub use error::{CliError, EXIT_RUNTIME, EXIT_VALIDATION};
pub use pipeline::{Manifest, PipelineConfig};
pub use stages::StageConfig;
