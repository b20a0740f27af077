//! Command-line harness around the MIGC model and the synthetic benchmark.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod pipeline;
pub mod request;

pub use config::RunConfig;
pub use error::{CliError, Result};
