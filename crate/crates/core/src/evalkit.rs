//! Pixel-wise segmentation metrics and report files.
//!
//! Crack pixels are the positive class. Aggregation over a dataset is
//! micro-averaged: confusion counts are summed across images before any
//! ratio is taken, so the dataset metrics equal the metrics of one giant
//! concatenated map. Matching is strict per pixel; there is no boundary
//! tolerance band.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::Serialize;

use crate::detector::BinaryCrackMap;
use crate::error::{Error, Result, Stage};

/// Pixel-wise confusion counts; sums are micro-aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            tn: self.tn + rhs.tn,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: ConfusionCounts) {
        *self = *self + rhs;
    }
}

/// Count agreement between a prediction and its ground truth.
///
/// Both maps are binary by construction; only the shapes can disagree.
pub fn confusion_counts(pred: &BinaryCrackMap, gt: &BinaryCrackMap) -> Result<ConfusionCounts> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::argument(
            Stage::Evalkit,
            format!(
                "prediction {}x{} and ground truth {}x{} differ",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 0) => counts.tn += 1,
            _ => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

/// The five reported metrics for one dataset, as fractions in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub n_images: usize,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Ratios from micro-aggregated counts.
///
/// Zero-denominator conventions (documented contract): precision is 0 when
/// nothing was predicted positive, recall is 0 when no positives exist,
/// F1 is 0 when precision+recall is 0, IoU is 0 when tp+fp+fn is 0.
pub fn compute_metrics(
    counts: ConfusionCounts,
    dataset_id: impl Into<String>,
    n_images: usize,
) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::argument(Stage::Evalkit, "cannot compute metrics over zero pixels"));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        dataset_id: dataset_id.into(),
        n_images,
        precision,
        recall,
        accuracy: ratio(counts.tp + counts.tn, counts.total()),
        f1,
        iou: ratio(counts.tp, counts.tp + counts.fp + counts.fn_),
    })
}

/// Write reports as CSV with metrics rendered as percentages ("61.808").
pub fn write_report(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::argument(Stage::Evalkit, "no reports to write"));
    }
    let mut out = String::from("dataset,n_images,precision,recall,accuracy,f1,iou\n");
    for r in reports {
        let values = [r.precision, r.recall, r.accuracy, r.f1, r.iou];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                Stage::Evalkit,
                "metrics",
                format!(" for dataset {}", r.dataset_id),
            ));
        }
        write!(out, "{},{}", r.dataset_id, r.n_images).expect("string write");
        for v in values {
            write!(out, ",{:.3}", v * 100.0).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(Error::io(Stage::Evalkit, path))
}

/// Area under the ROC curve via the rank statistic.
///
/// `scores` are anomaly scores (higher = more crack-like), `labels` the
/// binary ground truth. Ties receive average ranks, which matches the
/// trapezoidal ROC area. Needs both classes present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::argument(Stage::Evalkit, "scores and labels differ in length"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::argument(Stage::Evalkit, "labels must be 0 or 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric(Stage::Evalkit, "auroc", " (non-finite score)"));
    }
    let n_pos: u64 = labels.iter().map(|&l| l as u64).sum();
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::argument(
            Stage::Evalkit,
            "AUROC needs both classes in the ground truth",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average rank within each tied block, 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
