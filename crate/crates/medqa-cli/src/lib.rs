//! Command implementations behind the `medqa` binary, exposed as a library
//! so integration tests can drive them in-process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_cache_stats, cmd_cache_verify, cmd_eval, cmd_run_gen, cmd_run_mcq, RunSummary,
};
pub use config::{parse_systems, resolve_cache_path, CliError, RunConfig};
