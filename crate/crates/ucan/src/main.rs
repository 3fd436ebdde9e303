//! Thin command-line surface over the staged pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 data/format error,
//! 4 convergence error, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use ucan::config::RunConfig;
use ucan::pipeline;

#[derive(Parser)]
#[command(name = "ucan", about = "Adversarial detection via contrastive auxiliary networks", version)]
struct Cli {
    /// Run configuration file (flat [section] key = value format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed override: rewrites every stage seed deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset and persist the four splits.
    GenData,
    /// Train the backbone classifier, freeze it, persist it.
    TrainBackbone,
    /// Train the auxiliary refinement blocks against the frozen backbone.
    TrainAux,
    /// Score layers on the validation split and persist the selection.
    SelectLayers,
    /// Generate adversarial batches for the configured grid.
    Attack,
    /// Build and persist every detector from the train/calib splits.
    BuildDetector,
    /// Score all detectors on the persisted attack batches.
    Evaluate,
    /// Emit the CSV report, averaged PR plots, and overhead accounting.
    Report,
    /// Measure per-batch detector latency.
    Bench,
}

fn run(cli: &Cli) -> ucan::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data_seed = seed;
        cfg.backbone_seed = seed.wrapping_add(1);
        cfg.aux_seed = seed.wrapping_add(2);
        cfg.attack_seed = seed.wrapping_add(3);
        cfg.eval_seeds = vec![seed];
    }
    let out = env_out_override().unwrap_or_else(|| cli.out.clone());
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenData => pipeline::stage_gen_data(&cfg, &out),
        Command::TrainBackbone => pipeline::stage_train_backbone(&cfg, &out),
        Command::TrainAux => pipeline::stage_train_aux(&cfg, &out),
        Command::SelectLayers => pipeline::stage_select_layers(&cfg, &out),
        Command::Attack => pipeline::stage_attack(&cfg, &out),
        Command::BuildDetector => pipeline::stage_build_detector(&cfg, &out),
        Command::Evaluate => pipeline::stage_evaluate(&cfg, &out).map(|_| ()),
        Command::Report => pipeline::stage_report(&cfg, &out),
        Command::Bench => pipeline::stage_bench(&cfg, &out),
    }
}

/// The only environment knob: output directory override.
fn env_out_override() -> Option<PathBuf> {
    std::env::var_os("UCAN_OUT").map(PathBuf::from)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
