//! `microaunet` command-line runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ModelKind, SplitPart};

#[derive(Debug, Parser)]
#[command(name = "microaunet", version, about = "Train, distill, evaluate and account for MicroAUNet models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root (with images/ and masks/) or `synth:<count>`.
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Seed for synthetic data (defaults to --seed).
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Held-out share of the data; 0 uses the training set for validation.
    #[arg(long, global = true)]
    pub val_fraction: Option<f64>,
    /// Write attention maps of the first evaluation image as PGM.
    #[arg(long, global = true)]
    pub dump_attn: bool,
    /// Write prediction-boundary overlays as PPM (eval).
    #[arg(long, global = true)]
    pub overlays: bool,
    /// Foreground probability threshold for metrics.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Teacher checkpoint (distill).
    #[arg(long, global = true)]
    pub teacher: Option<PathBuf>,
    /// Model checkpoint (eval).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Custom network plan as JSON (count, eval).
    #[arg(long, global = true)]
    pub plan: Option<PathBuf>,
    /// Architecture of --checkpoint; detected from its tensor names when absent.
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelKind>,
    /// Which part of the split to evaluate.
    #[arg(long, global = true, value_enum)]
    pub split: Option<SplitPart>,
    /// Scales the analytic gradient of one gradcheck case (test hook).
    #[arg(long, global = true, hide = true)]
    pub corrupt_op: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Supervised training of the teacher network.
    TrainTeacher,
    /// Two-stage distillation of the student from a teacher checkpoint.
    Distill,
    /// Metrics of a checkpoint on a dataset.
    Eval,
    /// Parameter and FLOP report of the student and teacher plans.
    Count,
    /// Finite-difference check of every differentiable op and block.
    Gradcheck,
    /// Export a synthetic dataset in the images/masks layout.
    GenData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
