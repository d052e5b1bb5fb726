//! `pfpe` — policy-evaluation runs, hyperparameter sweeps and spectral
//! stability reports on finite MDPs.
//!
//! Exit codes: 0 success, 2 every seed diverged (a scientifically meaningful
//! outcome), 64 unusable configuration, 74 I/O failure. `PFPE_LOG` controls
//! diagnostic verbosity (e.g. `PFPE_LOG=debug`).

mod config;
mod runner;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_seed_list, ExperimentConfig};

const EXIT_CONFIG: u8 = 64;
const EXIT_IO: u8 = 74;

#[derive(Parser)]
#[command(
    name = "pfpe",
    version,
    about = "Policy evaluation with target parameters on finite MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list overriding the config.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run per seed and write full traces as CSV.
    Run(CommonArgs),
    /// Cartesian sweep over the configured k and alpha lists.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Concurrent sweep cells (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write the spectral stability report plus a condition-value curve.
    Analyze(CommonArgs),
    /// Preset: the off-policy counterexample environment.
    Baird {
        /// Inner steps per target refresh.
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        /// Total inner steps.
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, u8> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        eprintln!("error: reading {}: {e}", args.config.display());
        EXIT_IO
    })?;
    let mut config = ExperimentConfig::from_json(&text).map_err(|e| {
        eprintln!("error: {e:#}");
        EXIT_CONFIG
    })?;
    if let Some(list) = &args.seeds {
        config.seeds = parse_seed_list(list).map_err(|e| {
            eprintln!("error: {e:#}");
            EXIT_CONFIG
        })?;
    }
    Ok(config)
}

fn finish(outcome: anyhow::Result<i32>) -> ExitCode {
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            // Failures past config validation are output-side problems.
            ExitCode::from(EXIT_IO)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PFPE_LOG")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match load_config(&args) {
            Ok(config) => finish(runner::cli_run(&config, &args.out)),
            Err(code) => ExitCode::from(code),
        },
        Command::Sweep { common, jobs } => match load_config(&common) {
            Ok(config) => {
                if config.sweep.is_none() {
                    eprintln!("error: sweep section missing from config");
                    return ExitCode::from(EXIT_CONFIG);
                }
                finish(runner::cli_sweep(&config, &common.out, jobs))
            }
            Err(code) => ExitCode::from(code),
        },
        Command::Analyze(args) => match load_config(&args) {
            Ok(config) => {
                if config.analysis.is_none() {
                    eprintln!("error: analysis section missing from config");
                    return ExitCode::from(EXIT_CONFIG);
                }
                finish(runner::cli_analyze(&config, &args.out))
            }
            Err(code) => ExitCode::from(code),
        },
        Command::Baird {
            k,
            alpha,
            gamma,
            steps,
            seeds,
            out,
        } => {
            let seeds = match parse_seed_list(&seeds) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let config = runner::baird_preset(k, alpha, gamma, steps, seeds);
            finish(runner::cli_run(&config, &out))
        }
    }
}
