//! Operator surface for the bias-prior pipeline. The binary is a thin
//! wrapper around [`run_from_args`].

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{PriorMode, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "biasprior", version, about = "IMU bias-prior pipeline")]
pub struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic sequences in the EuRoC layout with a truth sidecar.
    GenSynthetic,
    /// Write a label JSON per sequence.
    MakeLabels {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the bias-prior network.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<id>.label.json`; defaults to `--data`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Write timestamped network bias priors per sequence.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run the fixed-lag estimator and write trajectories and bias estimates.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        /// off, oracle, network or file:PATH; overrides the config.
        #[arg(long)]
        prior: Option<String>,
        /// Label directory for oracle targets and the label column.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Network weights for `--prior network`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Compute ATE and RPE of TUM estimates against ground truth.
    Eval {
        /// TUM file, or directory of `<id>.tum`.
        #[arg(long)]
        est: PathBuf,
        /// TUM file or EuRoC sequence directory; a data directory when `--est` is a directory.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Time single-window network inference.
    BenchInfer {
        #[arg(long)]
        data: PathBuf,
        /// Seeded initialization is timed when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        max_windows: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
/// Errors go to standard error with a JSON tail line.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return 0;
            }
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.json_tail());
            return err.code();
        }
    };
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.json_tail());
            e.code()
        }
    }
}
