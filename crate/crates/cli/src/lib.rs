//! Experiment runner for avalign: scene synthesis, curriculum training,
//! counting, evaluation and gradient checks.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

pub use error::{CliError, Result};
