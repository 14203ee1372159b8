//! One function per subcommand, all driven by a resolved [`RunConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;

use crackdet_core::datapipe::synth::{generate_with, SynthParams};
use crackdet_core::datapipe::{discover_dataset, discover_split, load_gt_mask, load_patch, Split};
use crackdet_core::detector::{self, Detection};
use crackdet_core::evalkit::{compute_metrics, confusion_counts, write_report, ConfusionCounts, MetricsReport};
use crackdet_core::image::{save_gray_png, save_rgb_png, to_rgb8, ImagePatch};
use crackdet_core::losses::StyleExtractor;
use crackdet_core::maskgen::{build_mask_pool, export_mask_pngs};
use crackdet_core::model::load_generator;
use crackdet_core::trainer;
use crackdet_core::{Error, Result, Stage};

use crate::config::{AblateAxis, Provenance, RunConfig};

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let params = SynthParams {
        n_train: cfg.n_train,
        n_val: (cfg.n_train / 10).max(1),
        n_test: cfg.n_test,
        resolution: cfg.resolution,
        seed: cfg.seed,
    };
    let ds = generate_with(&cfg.data_root, &params)?;
    println!(
        "synth: {} train / {} val / {} test images at {}x{} under {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        cfg.resolution,
        cfg.resolution,
        cfg.data_root.display()
    );
    Ok(())
}

pub fn cmd_masks(cfg: &RunConfig) -> Result<()> {
    let pool = build_mask_pool(
        cfg.resolution,
        cfg.resolution,
        &cfg.mask_scales,
        cfg.mask_mode,
        cfg.seed,
    )?;
    let dir = cfg.run_dir.join("masks");
    export_mask_pngs(&pool, &dir)?;
    println!(
        "masks: exported {} {} masks ({} complement pairs) to {}",
        pool.masks().len(),
        cfg.mask_mode,
        pool.masks().len() / 2,
        dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    // Configuration problems should surface before any dataset I/O.
    let train_config = cfg.train_config();
    train_config.validate()?;
    let ds = discover_dataset(&cfg.data_root, cfg.resolution)?;
    let extractor = match &cfg.style_weights {
        Some(path) if train_config.weights.lambda_style > 0.0 => {
            Some(StyleExtractor::load(path, &Device::Cpu)?)
        }
        _ => None,
    };
    let outcome = trainer::fit(&cfg.run_dir, &train_config, &ds.train, &ds.val, extractor.as_ref())?;
    println!(
        "train: {} epochs ({}), best epoch {} with validation loss {:.6}; wrote {} and {}",
        outcome.history.rows.len(),
        if outcome.stopped_early { "stopped early" } else { "full budget" },
        outcome.best_epoch,
        outcome.best_val,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display(),
    );
    Ok(())
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| {
            Error::argument(Stage::Cli, format!("{} has no file stem", path.display()))
        })
}

/// 8-bit view of a single-channel unit-range patch.
fn gray8(patch: &ImagePatch) -> Vec<u8> {
    patch
        .plane(0)
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write_detection(
    cfg: &RunConfig,
    out_dir: &Path,
    stem: &str,
    image: &ImagePatch,
    gt_path: Option<&PathBuf>,
    det: &Detection,
) -> Result<()> {
    let (h, w) = (det.binary.height(), det.binary.width());
    let mask_png: Vec<u8> = det.binary.values().iter().map(|&v| v * 255).collect();
    save_gray_png(&out_dir.join(format!("{stem}_mask.png")), &mask_png, h, w)?;
    if cfg.write_error_maps {
        let unit = det.error.to_unit_patch();
        save_gray_png(&out_dir.join(format!("{stem}_error.png")), &gray8(&unit), h, w)?;
    }
    if cfg.write_overlays {
        if let Some(gt_path) = gt_path {
            let gt = load_gt_mask(gt_path, cfg.resolution)?;
            let overlay = detector::overlay(image, &det.binary, &gt)?;
            save_rgb_png(
                &out_dir.join(format!("{stem}_overlay.png")),
                &to_rgb8(&overlay),
                h,
                w,
            )?;
        }
    }
    Ok(())
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    let test = discover_split(&cfg.data_root, Split::Test, cfg.resolution)?;
    if test.entries.is_empty() {
        return Err(Error::argument(Stage::Datapipe, "test split contains no images"));
    }
    let checkpoint = cfg.checkpoint_path();
    let generator = load_generator(&checkpoint, &Device::Cpu)?;
    let params = cfg.detect_params();
    params.validate()?;
    let out_dir = cfg.pred_dir_path();
    std::fs::create_dir_all(&out_dir).map_err(Error::io(Stage::Cli, &out_dir))?;

    let mut clean = 0usize;
    for entry in &test.entries {
        let image = load_patch(&entry.image, cfg.resolution)?;
        let det = detector::detect(&generator, &image, &params)?;
        let stem = stem_of(&entry.image)?;
        write_detection(cfg, &out_dir, &stem, &image, entry.ground_truth.as_ref(), &det)?;
        clean += usize::from(det.no_anomaly);
    }
    println!(
        "detect: {} images with {} ({} flagged anomaly-free), masks in {}",
        test.entries.len(),
        checkpoint.display(),
        clean,
        out_dir.display()
    );
    Ok(())
}

/// Prediction masks found in `pred_dir`, keyed by the image stem.
fn prediction_index(pred_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut preds = BTreeMap::new();
    let entries = std::fs::read_dir(pred_dir).map_err(Error::io(Stage::Cli, pred_dir))?;
    for entry in entries {
        let path = entry.map_err(Error::io(Stage::Cli, pred_dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix("_mask.png") {
            preds.insert(stem.to_string(), path.clone());
        }
    }
    Ok(preds)
}

fn pairing_error(kind: &str, stems: Vec<&String>) -> Error {
    let shown: Vec<&str> = stems.iter().take(5).map(|s| s.as_str()).collect();
    let suffix = if stems.len() > shown.len() { ", ..." } else { "" };
    Error::Pairing {
        msg: format!("{} {kind}: {}{suffix}", stems.len(), shown.join(", ")),
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let test = discover_split(&cfg.data_root, Split::Test, cfg.resolution)?;
    let mut gt_index = BTreeMap::new();
    for entry in &test.entries {
        if let Some(gt) = &entry.ground_truth {
            gt_index.insert(stem_of(&entry.image)?, gt.clone());
        }
    }
    if gt_index.is_empty() {
        return Err(Error::Pairing {
            msg: format!("no ground-truth masks under {}", cfg.data_root.display()),
        });
    }
    let pred_dir = cfg.pred_dir_path();
    let preds = prediction_index(&pred_dir)?;

    let unmatched_gt: Vec<&String> = gt_index.keys().filter(|s| !preds.contains_key(*s)).collect();
    if !unmatched_gt.is_empty() {
        return Err(pairing_error("ground-truth images without a prediction", unmatched_gt));
    }
    let unmatched_pred: Vec<&String> = preds.keys().filter(|s| !gt_index.contains_key(*s)).collect();
    if !unmatched_pred.is_empty() {
        return Err(pairing_error("predictions without ground truth", unmatched_pred));
    }

    let mut total = ConfusionCounts::default();
    for (stem, gt_path) in &gt_index {
        let pred = load_gt_mask(&preds[stem], cfg.resolution)?;
        let gt = load_gt_mask(gt_path, cfg.resolution)?;
        let c = confusion_counts(&pred, &gt)?;
        total.tp += c.tp;
        total.fp += c.fp;
        total.tn += c.tn;
        total.fn_ += c.fn_;
    }
    let dataset_id = cfg
        .data_root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let report = compute_metrics(total, dataset_id, gt_index.len())?;
    let csv_path = cfg.run_dir.join("metrics.csv");
    write_report(std::slice::from_ref(&report), &csv_path)?;
    println!(
        "eval: {} images; precision {:.3} recall {:.3} accuracy {:.3} f1 {:.3} iou {:.3} (fractions); wrote {}",
        report.n_images,
        report.precision,
        report.recall,
        report.accuracy,
        report.f1,
        report.iou,
        csv_path.display()
    );
    Ok(report)
}

/// The loss-grid rows: which weights each variant zeroes, plus whether the
/// discriminator trains at all.
const LOSS_VARIANTS: &[(&str, &[&str], bool)] = &[
    ("mae_only", &["lambda_ssim", "lambda_gms", "lambda_style", "lambda_adv"], true),
    ("mae_ssim", &["lambda_gms", "lambda_style", "lambda_adv"], true),
    ("mae_ssim_gms", &["lambda_style", "lambda_adv"], true),
    ("all", &[], false),
];

const MASK_VARIANTS: &[&str] = &["multiscale_square", "striped", "jumbled"];

fn variant_config(cfg: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut v = cfg.clone();
    v.run_dir = cfg.run_dir.join(name);
    // Derived paths must land inside the variant directory, never be shared.
    v.checkpoint = None;
    v.pred_dir = None;
    Ok(v)
}

fn ablate_variants(cfg: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match cfg.ablate_axis {
        AblateAxis::Losses => {
            for (name, zeroed, freeze) in LOSS_VARIANTS {
                let mut v = variant_config(cfg, name)?;
                for key in *zeroed {
                    v.set_key(key, "0", Provenance::Flag)?;
                }
                if *freeze {
                    v.set_key("freeze_d", "true", Provenance::Flag)?;
                }
                out.push((name.to_string(), v));
            }
        }
        AblateAxis::Masks => {
            for name in MASK_VARIANTS {
                let mut v = variant_config(cfg, name)?;
                v.set_key("mask_mode", name, Provenance::Flag)?;
                out.push((name.to_string(), v));
            }
        }
    }
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let variants = ablate_variants(cfg)?;
    let mut reports = Vec::new();
    for (name, vcfg) in &variants {
        println!("ablate: running variant '{name}'");
        std::fs::create_dir_all(&vcfg.run_dir).map_err(Error::io(Stage::Cli, &vcfg.run_dir))?;
        std::fs::write(vcfg.run_dir.join("config.resolved"), vcfg.resolved_text())
            .map_err(Error::io(Stage::Cli, vcfg.run_dir.join("config.resolved")))?;
        cmd_train(vcfg)?;
        cmd_detect(vcfg)?;
        let mut report = cmd_eval(vcfg)?;
        report.dataset_id = name.clone();
        reports.push(report);
    }
    let combined = cfg.run_dir.join("ablation.csv");
    write_report(&reports, &combined)?;
    println!("ablate: {} variants on axis '{}', combined table at {}", reports.len(), cfg.ablate_axis, combined.display());
    Ok(())
}
