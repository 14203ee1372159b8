//! `crackdet`: one binary driving the whole pipeline.
//!
//! Exit codes: 0 success, 1 pipeline failure (message names the originating
//! module), 2 usage or configuration error. Every subcommand resolves its
//! configuration the same way (defaults < config file < flags) and snapshots
//! it to `<run_dir>/config.resolved` before doing any work.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crackdet_core::{Error, Result, Stage};

use config::{load_config, RunConfig};

/// Unsupervised crack detection by adversarial image restoration.
#[derive(Debug, Parser)]
#[command(name = "crackdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic road-surface dataset under --data-root.
    Synth(Overrides),
    /// Export the corruption mask pool as PNGs under <run_dir>/masks.
    Masks(Overrides),
    /// Train the restoration model on train/ and val/ undamaged patches.
    Train(Overrides),
    /// Restore the test split and write binary crack masks.
    Detect(Overrides),
    /// Score detection masks against ground truth and write metrics.csv.
    Eval(Overrides),
    /// Train/detect/eval a grid of configurations and tabulate the results.
    Ablate(Overrides),
}

/// Flag-level overrides; every field mirrors a config-file key and `None`
/// means "not given" so file values and defaults can show through.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat key=value config file (UTF-8, # comments).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset root with train/, val/ and test/ subdirectories.
    #[arg(long, value_name = "PATH")]
    pub data_root: Option<PathBuf>,
    /// Where checkpoints, history, detections and reports land.
    #[arg(long, value_name = "PATH")]
    pub run_dir: Option<PathBuf>,
    /// Checkpoint to load (default <run_dir>/best.ckpt).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Where detection masks go (default <run_dir>/detections).
    #[arg(long, value_name = "PATH")]
    pub pred_dir: Option<PathBuf>,
    /// Style-extractor weights file; required when lambda_style > 0.
    #[arg(long, value_name = "PATH")]
    pub style_weights: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub lr_decay_gamma: Option<f64>,
    #[arg(long)]
    pub lambda_mae: Option<f64>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    #[arg(long)]
    pub lambda_gms: Option<f64>,
    #[arg(long)]
    pub lambda_style: Option<f64>,
    #[arg(long)]
    pub lambda_res: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated mask cell sizes, e.g. 64,32,16.
    #[arg(long, value_name = "LIST")]
    pub mask_scales: Option<String>,
    /// multiscale_square | striped | jumbled
    #[arg(long, value_name = "MODE")]
    pub mask_mode: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Skip discriminator updates (requires lambda_adv = 0).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub freeze_d: Option<bool>,
    /// Drop the style term (no extractor weights needed).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub no_style: Option<bool>,
    /// Square working resolution; images are resized to it.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// direct | masked_ensemble
    #[arg(long, value_name = "STRATEGY")]
    pub strategy: Option<String>,
    #[arg(long)]
    pub bilateral_diameter: Option<usize>,
    #[arg(long)]
    pub sigma_intensity: Option<f64>,
    #[arg(long)]
    pub sigma_spatial: Option<f64>,
    /// Also write 8-bit raw error maps next to detection masks.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub write_error_maps: Option<bool>,
    /// Also write TP/FP/FN overlays where ground truth exists.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub write_overlays: Option<bool>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// losses | masks
    #[arg(long, value_name = "AXIS")]
    pub ablate_axis: Option<String>,
}

fn run(command: &Command) -> Result<()> {
    let overrides = match command {
        Command::Synth(o)
        | Command::Masks(o)
        | Command::Train(o)
        | Command::Detect(o)
        | Command::Eval(o)
        | Command::Ablate(o) => o,
    };
    let cfg: RunConfig = load_config(overrides)?;
    std::fs::create_dir_all(&cfg.run_dir).map_err(Error::io(Stage::Cli, &cfg.run_dir))?;
    let resolved = cfg.run_dir.join("config.resolved");
    std::fs::write(&resolved, cfg.resolved_text()).map_err(Error::io(Stage::Cli, &resolved))?;

    match command {
        Command::Synth(_) => commands::cmd_synth(&cfg),
        Command::Masks(_) => commands::cmd_masks(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Detect(_) => commands::cmd_detect(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg).map(|_| ()),
        Command::Ablate(_) => commands::cmd_ablate(&cfg),
    }
}

fn main() {
    // Clap handles usage errors itself and exits with code 2.
    let cli = Cli::parse();
    if let Err(err) = run(&cli.command) {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(if err.is_config() { 2 } else { 1 });
    }
}
