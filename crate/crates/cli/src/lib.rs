//! Command-line entry points and the HTTP labeling service.

pub mod commands;
pub mod service;

pub use commands::{CliError, Inputs};
