//! Scenario runner for ASD dynamic inversion controllers.
//!
//! A scenario is a JSON file naming a plant, the design inputs, ε, the input
//! limit and the simulation settings. Each command loads one or more
//! scenarios, builds the controller and writes its artifacts under
//! `<out>/<scenario>/<command>/`.

pub mod commands;
pub mod scenario;

use thiserror::Error;

pub use commands::{run, run_many, Command, Outcome, RunOptions};
pub use scenario::{Built, Scenario};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const VERIFICATION: i32 = 4;
    pub const MISSING_CONSTANTS: i32 = 5;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing assumption constants: {0}")]
    MissingConstants(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingConstants(_) => exit::MISSING_CONSTANTS,
            CliError::Io(_) | CliError::Runtime(_) => exit::RUNTIME,
        }
    }
}
