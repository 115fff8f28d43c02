//! Command-line front end for the tunable CBF library: TOML scenario files,
//! batch sweeps over a parameter, grid checks and margin estimates.

pub mod commands;
pub mod config;
pub mod output;
pub mod scenario;

pub use commands::{
    cmd_check, cmd_margin, cmd_simulate, cmd_sweep, CmdError, CommonArgs, EXIT_CONFIG, EXIT_OK,
    EXIT_RUN, EXIT_VIOLATION,
};
pub use config::ScenarioConfig;
pub use scenario::Scenario;
