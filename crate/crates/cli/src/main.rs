mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pconv_core::metrics::{Metric, MetricRegion};

use config::{parse_override, RunConfig};

const SEED_ENV: &str = "PCONV_SEED";

/// Partial-convolution inpainting and segmentation toolkit.
///
/// Exit codes: 0 success, 1 some samples failed to evaluate, 2 usage or
/// configuration error, 3 numerical failure during training.
#[derive(Parser, Debug)]
#[command(name = "pconv", version)]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.tsv.
    MakeData(MakeDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Fill the holes of an image with a trained inpainting model.
    Inpaint(InpaintArgs),
    /// Write the thresholded foreground of a segmentation model as a mask
    /// (foreground is the hole).
    Segment(SegmentArgs),
    /// Compute quality metrics over a manifest of image pairs.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Smooth random textures.
    Textures,
    /// Images with bright blobs plus label maps.
    Blobs,
    /// Irregular hole masks.
    Masks,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// What to generate.
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed [default: $PCONV_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Smallest hole fraction for `--kind masks`.
    #[arg(long, default_value_t = 0.05)]
    pub min_coverage: f64,
    /// Largest hole fraction for `--kind masks`.
    #[arg(long, default_value_t = 0.3)]
    pub max_coverage: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, toml::Value)>,
    /// Training seed; beats the config file and $PCONV_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iteration count; beats the config file.
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Directory for checkpoints and loss.tsv [default: the config's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the config and dataset, then exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    /// Inpainting checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PGM).
    #[arg(long)]
    pub image: PathBuf,
    /// Mask (PGM, 0 = hole).
    #[arg(long)]
    pub mask: PathBuf,
    /// Output image path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Segmentation checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PGM).
    #[arg(long)]
    pub image: PathBuf,
    /// Pixels with probability above this become foreground.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Grow the foreground by this many pixels.
    #[arg(long, default_value_t = 0)]
    pub dilate: usize,
    /// Output mask path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Two-column manifest: result image, reference image (or label maps for dice).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated metrics: psnr, ssim, dice.
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
    pub metrics: Vec<Metric>,
    /// Comma-separated regions: whole, hole, valid.
    #[arg(long, value_delimiter = ',', default_value = "whole")]
    pub regions: Vec<MetricRegion>,
    /// Manifest of masks, one row per pair, defining hole and valid regions.
    #[arg(long = "masks", alias = "mask-manifest")]
    pub masks: Option<PathBuf>,
    /// Peak intensity for PSNR and SSIM.
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    /// Label scored by dice.
    #[arg(long, default_value_t = 1)]
    pub label: u8,
    /// Report file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let base = args.config.parent().unwrap_or(std::path::Path::new(""));
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    if let Some(n) = args.max_iters {
        overrides.push(("max_iters".into(), toml::Value::Integer(n as i64)));
    }
    RunConfig::from_text(&text, base, &overrides, env_seed()?).map_err(CliError::Usage)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match &cli.command {
        Command::MakeData(a) => {
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            commands::make_data(a, seed)?;
        }
        Command::Train(a) => commands::train(a, train_config(a)?, cli.verbose)?,
        Command::Inpaint(a) => commands::inpaint(a)?,
        Command::Segment(a) => commands::segment(a)?,
        Command::Eval(a) => return commands::eval(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
