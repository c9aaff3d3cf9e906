//! `sseg`: command-line driver for the segmentation pipeline.
//!
//! Exit codes: 0 success, 1 usage error (help printed), 2 runtime error.

mod commands;
mod configs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sseg", version, about = "Open-vocabulary semantic segmentation from pseudo-masks and captions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every subcommand takes. Precedence: defaults < `--config` < `--set` < dedicated flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.n_queries=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic shapes dataset (images, labels, manifest, classes).
    Synth(SynthArgs),
    /// Generate and cache pseudo-masks for the images of a manifest.
    Pseudomask(PseudomaskArgs),
    /// Train a model on an image-caption manifest.
    Train(TrainArgs),
    /// Segment images with a trained model over a list of class names.
    Infer(InferArgs),
    /// Score prediction files against ground-truth labels.
    Eval(EvalArgs),
    /// Label images with a trained model, then train a closed-set student on them.
    Selftrain(SelftrainArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub max_shapes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PseudomaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cache root; masks land in `<out-dir>/<backbone id>/k<k>/<id>.png`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// `color` or `vit:<weights.safetensors>`.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also report oracle mIoU against the manifest's labels, using this class list.
    #[arg(long)]
    pub oracle_classes: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image-caption manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory: checkpoints, log and resolved configuration.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Starting point for all keys: `default` or `tiny`.
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model or student checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file, directory of PNGs, or JSONL manifest. Repeatable.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Comma-separated class names or a class-list file.
    #[arg(long)]
    pub classes: Option<String>,
    /// Background threshold; omit for no background.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Prompt template with one `{}`.
    #[arg(long)]
    pub template: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with `manifest.jsonl` and `classes.txt`, or a manifest path.
    #[arg(long)]
    pub gt: PathBuf,
    /// `with_background` or `without_background`.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Report directory (defaults to the prediction directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Teacher checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file, directory of PNGs, or JSONL manifest. Repeatable.
    #[arg(long, required = true)]
    pub images: Vec<PathBuf>,
    /// Comma-separated class names or a class-list file.
    #[arg(long)]
    pub classes: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            // Show the help of the subcommand that failed to parse, if any.
            let mut cmd = Cli::command();
            let name = std::env::args().nth(1).unwrap_or_default();
            let help = match cmd.find_subcommand_mut(&name) {
                Some(sub) => sub.render_help(),
                None => cmd.render_help(),
            };
            eprintln!("\n{help}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
