//! `psl`: train, evaluate, and verify pairwise listwise ranking losses.
//!
//! The binary is a thin dispatcher: configuration handling lives in
//! [`config`], the work in [`commands`].  Exit codes classify failures so
//! scripts can branch on them: 0 success, 1 configuration error, 2 data or
//! i/o error, 3 numeric error, 4 verification violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use psl_core::activations::ActivationKind;
use psl_core::Error;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "psl",
    version,
    about = "Pairwise listwise loss training, evaluation, and bound verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a raw TSV, k-core filter it, split it, and write a split directory.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set train.lr=0.01 (repeatable).
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every grid cell sequentially and keep the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Split directory produced by `prepare`.
        #[arg(long)]
        split: PathBuf,
        /// Directory for checkpoint.json, history.csv, and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a split's held-out interactions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Ranking cutoffs (repeatable or comma-separated).
        #[arg(long = "k", value_delimiter = ',', default_value = "20")]
        k: Vec<usize>,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured losses across noise ratios and tabulate degradation.
    SweepNoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        split: PathBuf,
        /// Noise ratios to train at (repeatable or comma-separated); the
        /// first one is each loss's degradation baseline.
        #[arg(long = "p", value_delimiter = ',', required = true)]
        p: Vec<f64>,
        /// Combined CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical verification suite and write its report.
    Verify {
        /// Grid points for the activation envelope checks.
        #[arg(long, default_value_t = 10_000)]
        resolution: usize,
        /// Random score instances for the bound chains.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate per-pair gradient weight curves over the gap range [-1, 1].
    Weights {
        /// Activation kinds (repeatable or comma-separated).
        #[arg(
            long = "kind",
            value_delimiter = ',',
            default_value = "exp,tanh_plus_one,atan_plus_one,relu_shift"
        )]
        kind: Vec<String>,
        /// Temperatures (repeatable or comma-separated).
        #[arg(long = "tau", value_delimiter = ',', default_value = "0.2")]
        tau: Vec<f64>,
        #[arg(long, default_value_t = 201)]
        points: usize,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> psl_core::Result<()> {
    match cli.command {
        Command::Prepare { config, set, out } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            commands::cmd_prepare(&cfg, &out)
        }
        Command::Train {
            config,
            set,
            split,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            commands::cmd_train(&cfg, &split, &out)
        }
        Command::Evaluate {
            checkpoint,
            split,
            k,
            out,
        } => commands::cmd_evaluate(&checkpoint, &split, &k, out.as_deref()),
        Command::SweepNoise {
            config,
            set,
            split,
            p,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            commands::cmd_sweep_noise(&cfg, &split, &p, &out)
        }
        Command::Verify {
            resolution,
            instances,
            seed,
            out,
        } => commands::cmd_verify(resolution, instances, seed, out.as_deref()),
        Command::Weights {
            kind,
            tau,
            points,
            out,
        } => {
            let kinds = kind
                .iter()
                .map(|s| s.parse())
                .collect::<psl_core::Result<Vec<ActivationKind>>>()?;
            commands::cmd_weights(&kinds, &tau, points, out.as_deref())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Numeric(_) => 3,
        Error::Verification(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not failures.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
