mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereo_translate::{Error, ErrorKind};

/// Stereo-consistent synthetic-to-real image translation.
#[derive(Debug, Parser)]
#[command(name = "stereo-translate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the normalized Sobel edge map of an image as 8-bit grayscale.
    Edges { input: PathBuf, output: PathBuf },
    /// Warp an image along rows by a disparity map; also writes a validity mask.
    Warp(WarpArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Translate every stereo pair of a synthetic manifest into the real domain.
    Translate(TranslateArgs),
    /// Score predicted disparities against a ground-truth manifest.
    Eval(EvalArgs),
    /// Print trainable parameter counts for a network configuration.
    Params(ParamsArgs),
    /// Write a procedural toy dataset with manifests for both domains.
    GenToy(GenToyArgs),
}

#[derive(Debug, Args)]
struct WarpArgs {
    left: PathBuf,
    disparity: PathBuf,
    output: PathBuf,
    /// Sampling direction: `+1` samples at `u + d`, `-1` at `u - d`.
    #[arg(long, default_value = "+1", allow_hyphen_values = true)]
    sign: String,
    /// Mask output path (default: `<output stem>_mask.png`).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of `none`, `edge`, `disp`, `edge+disp`.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    real: Option<PathBuf>,
    /// Run directory (default from config, then the environment).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from `<run_dir>/latest.ckpt` when present.
    #[arg(long)]
    resume: bool,
    /// Stop with a checkpoint after this many total steps.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Print a progress line every logged step.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Synthetic manifest with the pairs to translate.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override edge fusion (`on` or `off`); default follows the checkpoint.
    #[arg(long)]
    edges: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of `<id>.pfm` or `<id>.dsp` predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Manifest whose entries carry ground-truth disparities.
    #[arg(long)]
    gt: PathBuf,
    /// Report directory (default: the prediction directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    synthetic: usize,
    #[arg(long, default_value_t = 8)]
    real: usize,
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Edges { input, output } => commands::edges(&input, &output),
        Command::Warp(a) => commands::warp(&a.left, &a.disparity, &a.output, &a.sign, a.mask.as_deref()),
        Command::Train(a) => commands::train(commands::TrainOptions {
            config: a.config,
            ablation: a.ablation,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            seed: a.seed,
            checkpoint_every: a.checkpoint_every,
            workers: a.workers,
            synthetic: a.synthetic,
            real: a.real,
            run_dir: a.run_dir,
            resume: a.resume,
            stop_after: a.stop_after,
            verbose: a.verbose,
        }),
        Command::Translate(a) => commands::translate(&a.checkpoint, &a.manifest, &a.out, a.edges.as_deref(), a.workers),
        Command::Eval(a) => commands::eval(&a.pred_dir, &a.gt, a.out.as_deref()),
        Command::Params(a) => commands::params(a.config.as_deref(), a.base_channels),
        Command::GenToy(a) => commands::gen_toy(&a.out, a.synthetic, a.real, a.rows, a.cols, a.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(problems)) => {
            eprintln!("error: invalid configuration");
            for p in &problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
