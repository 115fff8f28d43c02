use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tuncbf_cli::{cmd_check, cmd_margin, cmd_simulate, cmd_sweep, CommonArgs};

#[derive(Parser)]
#[command(
    name = "tuncbf",
    version,
    about = "Closed-form CBF safety filters: simulate, sweep, check"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set controller.eta=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (defaults to `output.dir`, then the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random disturbances.
    #[arg(long)]
    seed: Option<u64>,
    /// Hold the input constant over each integration step.
    #[arg(long)]
    zoh: bool,
    /// Fail before simulating if the controller is out of range at the initial state.
    #[arg(long)]
    strict_range: bool,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        Self {
            config: c.config,
            set: c.set,
            out: c.out,
            seed: c.seed,
            zoh: c.zoh,
            strict_range: c.strict_range,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write `trajectory.csv`.
    Simulate(Common),
    /// Run once per value of a parameter and write a summary.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep; bare names refer to the `controller` table.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Check compatibility and tunable-term range over the `[check]` grid.
    Check(Common),
    /// Sample the safety margin over the `[check]` grid.
    Margin(Common),
}

fn main() -> ExitCode {
    let code = match Cli::parse().command {
        Command::Simulate(c) => cmd_simulate(&c.into()),
        Command::Sweep {
            common,
            param,
            values,
        } => cmd_sweep(&common.into(), &param, &values),
        Command::Check(c) => cmd_check(&c.into()),
        Command::Margin(c) => cmd_margin(&c.into()),
    };
    ExitCode::from(code)
}
