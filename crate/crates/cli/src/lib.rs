//! Command-line front end: argument parsing, run orchestration and the
//! on-disk artifacts of each command.

pub mod args;
pub mod commands;
pub mod pipeline;

pub use args::Cli;
pub use commands::{run, UsageError};
