//! Library behind the `conform` binary: config files, guided runs, τ
//! ablations, gradient checks, benchmark config generation and map export.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
