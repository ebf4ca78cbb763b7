//! `connlens` command-line front end.
//!
//! Every subcommand writes a JSON report named after itself into `--out-dir`,
//! next to any CSV tables and PPM images it produces. The process exits with
//! status 0 only when the command completed without error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use connlens::geometry::{Metric, Pooling};
use connlens::recon::{Activation, Arch};
use connlens::synth::SynthKind;

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "connlens", version, about = "Measure what a vision-language connector loses")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for reports and artifacts (default: current directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML or JSON file supplying defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic EMBD file with a known ground truth.
    Synth(SynthArgs),
    /// k-NN overlap ratio between pre- and post-projection spaces.
    Knor(KnorArgs),
    /// Zero-shot retrieval Recall@k in both spaces.
    Retrieve(RetrieveArgs),
    /// Train a reconstruction model from post- to pre-projection embeddings.
    ReconTrain(ReconTrainArgs),
    /// Per-sample and per-patch reconstruction losses of a trained model.
    ReconEval(ReconEvalArgs),
    /// PCA plus orthogonal Procrustes alignment baseline.
    Procrustes(ProcrustesArgs),
    /// Correlate per-sample losses with task scores.
    Correlate(CorrelateArgs),
    /// Render a patch-loss grid as a diverging heatmap.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub m1: usize,
    #[arg(long, default_value_t = 4)]
    pub m2: usize,
    /// Pre-projection width.
    #[arg(long, default_value_t = 16)]
    pub d_pre: usize,
    /// Post-projection width.
    #[arg(long, default_value_t = 16)]
    pub d_post: usize,
    /// Draw samples around this many class centroids and write labels.csv.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Noise standard deviation for the noisy kind.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output file (default: <out-dir>/synth-<kind>.embd).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KnorArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Neighbourhood sizes (default 10,50,100).
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `id,class` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// Recall cut-offs (default 1,5,10).
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Restrict to one metric (default: both l2 and ip).
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
}

#[derive(Debug, Args)]
pub struct ReconTrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Separate validation file; otherwise a seeded fraction of the input is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub trainer: TrainerArgs,
    /// Parameter count of the connector being inverted, for the capacity check.
    #[arg(long)]
    pub connector_params: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    /// mlp hidden widths (default 2048).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    /// seqreg model width (default 2048).
    #[arg(long)]
    pub width: Option<usize>,
    /// seqreg encoder layers (default 4).
    #[arg(long)]
    pub layers: Option<usize>,
    /// seqreg attention heads (default 8).
    #[arg(long)]
    pub heads: Option<usize>,
    /// seqreg feed-forward width (default 4 × width).
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Args)]
pub struct TrainerArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReconEvalArgs {
    /// RCPT checkpoint written by recon-train.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Report norm differences in original rather than normalized units.
    #[arg(long)]
    pub denormalize_norms: bool,
}

#[derive(Debug, Args)]
pub struct ProcrustesArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// `id,mean_loss` CSV from recon-eval.
    #[arg(long)]
    pub losses: PathBuf,
    /// `id,score` CSV.
    #[arg(long)]
    pub scores: PathBuf,
    /// Name of the score column in the report.
    #[arg(long, default_value = "score")]
    pub score_name: String,
    /// Patch loss maps (JSON from recon-eval) for the mask split.
    #[arg(long, requires = "masks")]
    pub maps: Option<PathBuf>,
    /// Directory of `<id>.pgm` or `<id>.csv` relevance masks.
    #[arg(long, requires = "maps")]
    pub masks: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub mask_threshold: f64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Grid CSV, one row of the patch grid per line.
    #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
    pub grid: Option<PathBuf>,
    /// Patch loss maps (JSON from recon-eval); select one with --id.
    #[arg(long, requires = "id")]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Which grid of a loss map to draw: sq-error or norm-diff.
    #[arg(long, default_value = "sq-error", value_parser = ["sq-error", "norm-diff"])]
    pub field: String,
    /// Background PPM image for an overlay.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Outline the k highest cells (0 for none).
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Pixels per cell in the standalone heatmap.
    #[arg(long, default_value_t = 16)]
    pub cell_px: usize,
    /// File name stem for the outputs.
    #[arg(long, default_value = "heatmap")]
    pub name: String,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: connlens::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: connlens::Error| e.to_string())
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    s.parse().map_err(|e: connlens::Error| e.to_string())
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: connlens::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: connlens::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> connlens::Result<()> {
        let file = match &cli.global.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let ctx = config::Context::resolve(&cli.global, file)?;
        commands::run(&ctx, &cli.command)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
