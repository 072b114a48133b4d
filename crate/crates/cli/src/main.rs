use std::path::PathBuf;
use std::process::ExitCode;

use asdinv_cli::{run_many, Command, RunOptions};
use clap::Parser;

/// Design, simulate, verify and bound ASD dynamic inversion controllers.
#[derive(Debug, Parser)]
#[command(name = "asdinv", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Bundled scenario name or path to a JSON file; repeat for several.
    #[arg(long, required = true)]
    scenario: Vec<String>,
    /// Override a field, e.g. `--set epsilon=0.05` or `--set sim.x0.0=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenarios run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Leave the timestamp out of summary.json so reruns are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions {
        out: args.out,
        timestamp: !args.no_timestamp,
        overrides: args.set,
    };
    let outcomes = run_many(args.command, &args.scenario, &opts, args.jobs);
    let mut code = 0;
    for o in &outcomes {
        let line = format!("{} {}: {}", o.command.name(), o.scenario, o.message);
        if o.ok() {
            println!("{line}");
        } else {
            eprintln!("{line} (exit {})", o.code);
            if code == 0 {
                code = o.code;
            }
        }
    }
    ExitCode::from(code as u8)
}
