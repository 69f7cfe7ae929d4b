mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adafuse_core::model::{FusionMode, Preset};

/// Train and evaluate a two-stream RGB-D saliency network with switch-map fusion.
#[derive(Debug, Parser)]
#[command(name = "adafuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic RGB-D dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model; writes a loss log and checkpoints.
    Train(TrainArgs),
    /// Write per-sample saliency maps as 8-bit PGM files.
    Predict(PredictArgs),
    /// Compute PR curve, max-F, mean-F and MAE of fused maps.
    Eval(EvalArgs),
    /// Compare every parameter gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Four category weights summing to 1.
    #[arg(long, default_value = "0.25,0.25,0.25,0.25")]
    mix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Every field may also come from `--config`; flags win.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// File of `key = value` lines using the long flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    #[arg(long)]
    drop_edge_loss: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    val_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Expected architecture; a checkpoint that does not fit is rejected.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `<id>.fused.pgm` maps.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pred_dir: Option<PathBuf>,
    /// Predict on the fly instead of reading maps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resolution used with `--checkpoint`.
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Only evaluate synthetic samples of this category (1-4).
    #[arg(long)]
    category: Option<u8>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    coords: usize,
    /// Fusion mode of the audited model.
    #[arg(long, default_value = "switch")]
    fusion_mode: FusionMode,
    /// Corrupts the analytic gradient of one parameter group (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
