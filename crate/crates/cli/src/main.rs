//! `ads`: data generation, training, evaluation, ablation and gradient
//! checks for the adaptive domain scaling ranker.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Experiments with the adaptive domain scaling ranker.
///
/// Exit codes: 0 success, 1 I/O failure, 2 invalid configuration or data,
/// 3 numerical failure (non-finite loss or a failed gradient check).
///
/// The optional `ADS_NUM_THREADS` environment variable caps the worker
/// threads used for evaluation sharding and parallel ablation runs.
#[derive(Parser, Debug)]
#[command(name = "ads", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain dataset with oracle AUCs.
    GenData {
        /// Synthetic spec JSON; omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        /// Directory receiving train/val/test JSONL and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, writing checkpoints and a metrics report.
    Train {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured data.
    Eval {
        /// Run configuration JSON; its model must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train full, no_pcrg and no_pcrg_psrg over the configured seeds.
    Ablate {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Run configuration JSON; without it every ablation and backbone
        /// of the tiny model is checked on random records.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Samples in the checked batch.
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Seed for the randomized parameters.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Pass threshold on the maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ADS_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ADS_NUM_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Train { config } => commands::train(&config),
        Command::Eval { config, checkpoint } => commands::eval(&config, &checkpoint),
        Command::Ablate { config } => commands::ablate(&config),
        Command::Gradcheck {
            config,
            batch,
            seed,
            tolerance,
        } => commands::gradcheck(config.as_deref(), batch, seed, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
