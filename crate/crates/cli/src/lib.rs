//! Library side of the `geopath` command-line tool: run configuration,
//! the pipeline commands and their report writers.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::Context;
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

/// Environment variable naming the default report directory.
pub const REPORT_DIR_ENV: &str = "GEOPATH_REPORT_DIR";

/// Report directory used when neither the flag nor the variable is set.
pub const DEFAULT_REPORT_DIR: &str = "reports";
