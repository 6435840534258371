use std::path::PathBuf;
use std::process::ExitCode;

use cda_nse_cli::{load_config, run_experiment, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cda-nse", version, about = "Run nudged Navier-Stokes experiments from a JSON config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set solver.mu=1e4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Cells solved concurrently (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (default: `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(config: PathBuf, set: Vec<String>, workers: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(&config, &set)?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let summary = run_experiment(&cfg, workers, &out)?;
    eprintln!(
        "{} cells, {} not converged, {} failed; report at {}",
        summary.cells,
        summary.non_converged_cells,
        summary.failed_cells,
        summary.report_json.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, set, workers, out } => run(config, set, workers, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cda-nse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
