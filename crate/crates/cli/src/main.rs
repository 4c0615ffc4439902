use std::path::PathBuf;
use std::process::ExitCode;

use became_cli::commands;
use became_cli::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "became", version, about = "Two-stage continual learning with adaptive checkpoint merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the merging method and its baselines for every configured seed.
    Run {
        config: PathBuf,
        /// Validate and print the resolved config without training.
        #[arg(long)]
        dry_run: bool,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Loss along the merge path of one task of a finished run.
    Sweep {
        run_dir: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
    /// Exact checks on random quadratic instances.
    Lab {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        instances: u64,
        #[arg(long, default_value = "lab_report.csv")]
        out: PathBuf,
    },
    /// Metrics of an accuracy matrix CSV.
    Metrics { acc_matrix: PathBuf },
    /// Loss on the plane through three checkpoints of one task.
    Landscape {
        run_dir: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let mut stdout = std::io::stdout();
    let result: Result<(), CliError> = match cli.command {
        Command::Run { config, dry_run, jobs } => commands::cmd_run(&config, dry_run, jobs, &mut stdout).map(|_| ()),
        Command::Sweep { run_dir, task, step } => commands::cmd_sweep(&run_dir, task, step, &mut stdout).map(|_| ()),
        Command::Lab { seed, instances, out } => {
            commands::cmd_lab(seed, instances as usize, &out, &mut stdout).map(|_| ())
        }
        Command::Metrics { acc_matrix } => commands::cmd_metrics(&acc_matrix, &mut stdout).map(|_| ()),
        Command::Landscape {
            run_dir,
            task,
            resolution,
            margin,
        } => commands::cmd_landscape(&run_dir, task, resolution, margin, &mut stdout).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
