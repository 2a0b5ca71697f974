//! `frcnn`: synthetic data, training, evaluation, ablation sweeps and kernel pictures.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for missing or
//! unwritable files and failed runs.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use facade_core::experiment::Sweep;

#[derive(Debug, Parser)]
#[command(name = "frcnn", version, about = "Deformation-aware facade parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic deformed-facade dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metrics JSON.
    Eval(EvalArgs),
    /// Run an ablation sweep and emit `setting,miou,accuracy` CSV.
    Ablate(AblateArgs),
    /// Write base and transformed kernels as grayscale PNGs.
    DemoKernels(DemoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Height-shear range in degrees, `A,B`.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true, default_value = "-40,40")]
    pub shear_range: (f64, f64),
    /// Lower bound of the per-scene column scale decay.
    #[arg(long, default_value_t = 0.8)]
    pub decay: f64,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    /// Largest facade count per scene (1 or 2).
    #[arg(long, default_value_t = 2)]
    pub facades: usize,
    /// Background and window labels only.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config; defaults adapted to the dataset's classes when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_parser = parse_assignment)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the checkpoint's `model.fuse_threshold`.
    #[arg(long)]
    pub fuse_threshold: Option<f64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for fused masks, overlays and detections.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = parse_sweep)]
    pub sweep: Sweep,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_parser = parse_assignment)]
    pub overrides: Vec<(String, String)>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Sweep values (alphas or thresholds) replacing the defaults.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Vec<f64>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Shear angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,30,45")]
    pub phi: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Odd kernel side.
    #[arg(long, default_value_t = 7)]
    pub size: usize,
    /// Output pixels per kernel cell.
    #[arg(long, default_value_t = 24)]
    pub scale: usize,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected A,B, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse().map_err(|e: facade_core::Error| e.to_string())
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<facade_core::Error> for Failure {
    fn from(e: facade_core::Error) -> Self {
        use facade_core::Error as E;
        let code = match e {
            E::Config(_) | E::InvalidArgument(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::DemoKernels(a) => commands::demo_kernels(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
