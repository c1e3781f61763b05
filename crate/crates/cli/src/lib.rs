//! Command-line front end: settings, artifact formats, manifests and plots.

pub mod commands;
pub mod config;
pub mod io;
pub mod manifest;
pub mod plot;

pub use commands::{run, Cli, UsageError};
