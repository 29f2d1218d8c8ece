use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Low-light image enhancement with SurroundNet.
#[derive(Parser, Debug)]
#[command(name = "surroundnet", version)]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance one PNG or every PNG in a directory.
    Enhance {
        /// Input image or directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Trained checkpoint; the network shape is read from it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; files keep their names.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a network on paired data.
    Train(TrainArgs),
    /// Synthesize low-light training pairs.
    Synth(SynthArgs),
    /// Fit darkening parameters to low/normal-light pairs.
    Fit(FitArgs),
    /// PSNR and SSIM of predictions against references.
    Eval(EvalArgs),
    /// Single- or multi-scale Retinex baseline.
    Ssr(SsrArgs),
    /// Finite-difference check of the network's gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter counts per module and in total.
    Params(NetArgs),
}

/// Configuration file plus overrides, shared by `train` and `params`.
#[derive(Args, Debug, Clone, Default)]
struct NetArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Paired dataset directory (low/, high/, optional led_target/).
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Dataset for the first stage of a two-stage schedule.
    #[arg(long)]
    pretrain_data: Option<PathBuf>,
    /// Held-out dataset for periodic PSNR/SSIM.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Steps on the training data.
    #[arg(long)]
    steps: Option<u64>,
    /// Steps on the pretraining data.
    #[arg(long)]
    pretrain_steps: Option<u64>,
    /// Patches per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Patch side in pixels.
    #[arg(long)]
    patch: Option<usize>,
    /// Seed of initialization and patch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Disable the low-exposure supervision term.
    #[arg(long)]
    no_les: bool,
    /// Checkpoint path; optimizer state is written next to it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Steps between checkpoints.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Per-step loss log, appended to.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from the checkpoint and its optimizer state.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of normal-light images to darken.
    #[arg(long, conflicts_with = "procedural")]
    input: Option<PathBuf>,
    /// Generate this many procedural scenes instead of reading images.
    #[arg(long)]
    procedural: Option<usize>,
    /// Side of procedural scenes in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Standard deviation of additive Gaussian noise on the dark images.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output dataset directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Low-light image of a single pair.
    #[arg(long, requires = "high", conflicts_with_all = ["data", "darken"])]
    low: Option<PathBuf>,
    /// Normal-light image of a single pair.
    #[arg(long, conflicts_with = "data")]
    high: Option<PathBuf>,
    /// Darken --high in memory with ALPHA,BETA,GAMMA and fit the result,
    /// a round trip free of 8-bit quantization.
    #[arg(long, value_delimiter = ',', value_name = "ALPHA,BETA,GAMMA", requires = "high")]
    darken: Option<Vec<f64>>,
    /// Dataset directory: fit every pair, write led_target/ and the manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the pixel subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted image or directory.
    #[arg(long, requires = "target", conflicts_with_all = ["checkpoint", "data"])]
    pred: Option<PathBuf>,
    /// Reference image or directory.
    #[arg(long, requires = "pred")]
    target: Option<PathBuf>,
    /// Checkpoint to evaluate on a paired dataset.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Paired dataset directory, used with --checkpoint.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SsrArgs {
    /// Input image or directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// Gaussian surround scale for single-scale Retinex.
    #[arg(long, default_value_t = 80.0, conflicts_with = "scales")]
    sigma: f64,
    /// Comma-separated scales for multi-scale Retinex with equal weights.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates to probe.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Relative error threshold.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Side of the random test image.
    #[arg(long, default_value_t = 12)]
    size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
