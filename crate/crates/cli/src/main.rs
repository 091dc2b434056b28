use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fjlab_cli::commands::{self, Context};
use fjlab_cli::config::RunConfig;
use fjlab_cli::verify;
use fjlab_cli::CliResult;

#[derive(Parser)]
#[command(
    name = "fjlab",
    version,
    about = "Simulate, fit and analyse multi-agent belief trajectories"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random draw (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for reports and generated files.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate trajectories from FJ parameters or a synthetic scenario.
    Simulate {
        /// Output file (default: <output-dir>/trajectories.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit FJ parameters to each trajectory.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Also fit one parameter set shared by all samples.
        #[arg(long)]
        global: bool,
    },
    /// Write agent and system metric tables.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// fit_report.json produced by `fit`.
        #[arg(long)]
        params: PathBuf,
    },
    /// Check the theory against closed forms and Monte Carlo.
    Verify,
    /// Baseline, FJ-ensemble and final-round accuracy per pool.
    Compare {
        /// One or more trajectory files; each file's pools are kept apart.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
        output_dir: cli.output_dir,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Simulate { output } => commands::simulate(&ctx, output.as_deref()).map(|_| ()),
        Command::Fit { input, global } => commands::fit(&ctx, &input, global).map(|_| ()),
        Command::Analyze { input, params } => commands::analyze(&ctx, &input, &params).map(|_| ()),
        Command::Verify => verify::verify(&ctx).map(|_| ()),
        Command::Compare { input } => commands::compare(&ctx, &input).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
