//! The `ptnet` command line: dataset generation, training, synthesis,
//! evaluation, attention benchmarking and gradient checking.

pub mod bench;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ptnet_core::{Error, Result};

pub use bench::{bench_attention, BenchRow};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ptnet", version, about = "Pyramid transformer for MRI contrast synthesis")]
pub struct Cli {
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration (`preset`, `model`, `train`).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (output file for `synthesize`).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset with a manifest.
    GenData(GenDataArgs),
    /// Train on the manifest's train split, selecting on its val split.
    Train(TrainArgs),
    /// Translate a source volume slice by slice.
    Synthesize(SynthesizeArgs),
    /// Per-volume SSIM/pSNR on a manifest split.
    Evaluate(EvaluateArgs),
    /// Time exact against FAVOR+ attention over sequence lengths.
    BenchAttention(BenchArgs),
    /// Finite-difference check of the model's backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub volumes: usize,
    /// In-plane extent before cropping, `XxY`.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Slices per volume.
    #[arg(long, default_value_t = 8)]
    pub slices: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthesizeArgs {
    #[arg(short = 'k', long)]
    pub checkpoint: PathBuf,
    /// `[X, Y, Z]` source volume (PTT1).
    #[arg(short, long)]
    pub input: PathBuf,
    /// Reflect-pad slices to the network's extent multiple, then crop back.
    #[arg(long)]
    pub pad: bool,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(short = 'k', long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: ptnet_core::data::Split,
    /// Paired t-test against another run's `metrics.csv`.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Also write every error-map slice as an 8-bit PGM.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub dk: usize,
    /// Random features.
    #[arg(short, long, default_value_t = 32)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Square input extent.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates sampled per tensor; all when omitted.
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Scale the analytic gradients by 1.01 (negative control).
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected XxY, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(x)?, parse(y)?))
}

fn parse_split(s: &str) -> std::result::Result<ptnet_core::data::Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("split must be train, val or test, got {s:?}"))
}

/// 2 for configuration and shape errors, 4 for numeric failures, 3 for
/// everything touching data.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&cfg, a, out),
        Command::Train(a) => commands::train(&cfg, a, out),
        Command::Synthesize(a) => commands::synthesize(a, out),
        Command::Evaluate(a) => commands::evaluate(&cfg, a, out),
        Command::BenchAttention(a) => commands::bench_attention(&cfg, a, out),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, cli.config.is_some(), a, out),
    }
}
