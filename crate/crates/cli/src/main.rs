use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqsync_cli::commands::{cmd_oracle, cmd_run, cmd_sweep, cmd_validate, LoadOptions};

#[derive(Parser)]
#[command(name = "freqsync", version, about = "Simulate distributed frequency control over delayed links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Replace the seed of every random element (delay draws, disturbances).
    #[arg(long)]
    seed: Option<u64>,
    /// Override a scenario key, e.g. `sim.t_end=50` or `buses.0.demand=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn options(&self) -> LoadOptions {
        LoadOptions { seed: self.seed, overrides: self.overrides.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario; write the trajectory CSV and metrics, print PASS/FAIL.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: the scenario's output.dir, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add storage-function columns and checks.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Print the optimal dispatch for the scenario's final demand as CSV.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run once per value of a parameter, in parallel; print a metrics table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted scenario key such as `delays.uniform`, or `seed`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario without running it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run { common, out, diagnostics } => {
            cmd_run(&common.scenario, &common.options(), out.as_deref(), *diagnostics)
        }
        Command::Oracle { common, out } => cmd_oracle(&common.scenario, &common.options(), out.as_deref()),
        Command::Sweep { common, param, values, out } => {
            cmd_sweep(&common.scenario, &common.options(), param, values, out.as_deref())
        }
        Command::Validate { common } => cmd_validate(&common.scenario, &common.options()),
    };
    ExitCode::from(code as u8)
}
