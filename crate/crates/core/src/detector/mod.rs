//! Inference chain: restore, square the residual, smooth, binarize.
//!
//! `detect` is a strict composition of the four public stages; nothing is
//! fused, so every intermediate can be inspected or exported. All stages
//! are deterministic given the model and parameters.

mod bilateral;
mod otsu;

pub use bilateral::smooth_bilateral;
pub use otsu::{otsu_argmax, otsu_threshold, OtsuOutcome};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::image::{ImagePatch, ValueRange};
use crate::maskgen::{build_mask_pool, Mask, MaskMode};

/// Per-pixel channel-averaged squared restoration residual.
///
/// Values are finite and nonnegative by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ErrorMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dimension(
                Stage::Detector,
                format!("error map {height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::numeric(Stage::Detector, "error_map", format!(" (value {bad})")));
        }
        Ok(ErrorMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Min-max scaled grayscale view in unit range, for PNG export.
    /// Constant maps render as black.
    pub fn to_unit_patch(&self) -> ImagePatch {
        let data: Vec<f32> = match min_max(&self.values) {
            None => vec![0.0; self.values.len()],
            Some((lo, hi)) => {
                self.values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
            }
        };
        ImagePatch::from_data(1, self.height, self.width, ValueRange::Unit, data)
            .expect("length matches by construction")
    }
}

/// Strictly binary crack map; 1 marks a crack pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCrackMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryCrackMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dimension(
                Stage::Detector,
                format!("crack map {height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::argument(Stage::Detector, "crack map values must be 0 or 1"));
        }
        Ok(BinaryCrackMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn crack_pixels(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Grayscale view (0 or 1 in unit range) for PNG export as 0/255.
    pub fn to_unit_patch(&self) -> ImagePatch {
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        ImagePatch::from_data(1, self.height, self.width, ValueRange::Unit, data)
            .expect("length matches by construction")
    }
}

/// How the restored image is produced at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreStrategy {
    /// Single eval-mode generator pass on the unmasked image.
    Direct,
    /// Restore each complement-pair corruption and stitch the outputs from
    /// removed regions only, averaged over scales. Slower, but every output
    /// pixel is predicted from context rather than copied.
    MaskedEnsemble,
}

impl std::fmt::Display for RestoreStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RestoreStrategy::Direct => "direct",
            RestoreStrategy::MaskedEnsemble => "masked_ensemble",
        })
    }
}

impl std::str::FromStr for RestoreStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(RestoreStrategy::Direct),
            "masked_ensemble" => Ok(RestoreStrategy::MaskedEnsemble),
            other => Err(Error::argument(
                Stage::Detector,
                format!("unknown restore strategy '{other}' (expected direct or masked_ensemble)"),
            )),
        }
    }
}

/// Everything `detect` needs besides the model and the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub strategy: RestoreStrategy,
    pub bilateral_diameter: usize,
    pub sigma_intensity: f64,
    pub sigma_spatial: f64,
    /// Mask pool settings, used by the masked_ensemble strategy only.
    pub mask_scales: Vec<usize>,
    pub mask_mode: MaskMode,
    pub mask_seed: u64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            strategy: RestoreStrategy::Direct,
            bilateral_diameter: 9,
            sigma_intensity: 75.0,
            sigma_spatial: 75.0,
            mask_scales: vec![128, 64, 32],
            mask_mode: MaskMode::MultiscaleSquare,
            mask_seed: 0,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == RestoreStrategy::MaskedEnsemble && self.mask_scales.is_empty() {
            return Err(Error::argument(
                Stage::Detector,
                "masked_ensemble needs at least one mask scale",
            ));
        }
        Ok(())
    }
}

/// Eval-mode restoration backend.
///
/// `restore_batch` maps a signed-range (N,C,H,W) batch to a signed-range
/// batch of the same shape, deterministically (no dropout).
pub trait Restorer {
    fn restore_batch(&self, corrupted: &Tensor) -> Result<Tensor>;
    fn input_channels(&self) -> usize;
    fn device(&self) -> &Device;
}

/// Full output of one detection, intermediates included.
#[derive(Debug, Clone)]
pub struct Detection {
    pub restored: ImagePatch,
    pub error: ErrorMap,
    pub smoothed: ErrorMap,
    pub threshold: Option<u8>,
    pub no_anomaly: bool,
    pub binary: BinaryCrackMap,
}

fn mask_to_tensor(mask: &Mask, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = mask.grid().iter().map(|&v| v as f32).collect();
    Tensor::from_vec(data, (1, 1, mask.height(), mask.width()), device)
        .map_err(Error::tensor(Stage::Detector))
}

/// Restore a unit-range patch with the chosen strategy; output unit range.
pub fn restore<R: Restorer + ?Sized>(
    model: &R,
    image: &ImagePatch,
    params: &DetectParams,
) -> Result<ImagePatch> {
    params.validate()?;
    if image.range() != ValueRange::Unit {
        return Err(Error::argument(Stage::Detector, "restore expects a unit-range patch"));
    }
    if image.channels() != model.input_channels() {
        return Err(Error::dimension(
            Stage::Detector,
            format!(
                "model expects {} channels, image has {}",
                model.input_channels(),
                image.channels()
            ),
        ));
    }
    let device = model.device();
    let backend = Error::tensor(Stage::Detector);
    let x = image
        .to_tensor(device)?
        .unsqueeze(0)
        .and_then(|t| t.affine(2.0, -1.0))
        .map_err(backend)?;

    let restored = match params.strategy {
        RestoreStrategy::Direct => model.restore_batch(&x)?,
        RestoreStrategy::MaskedEnsemble => {
            let pool = build_mask_pool(
                image.height(),
                image.width(),
                &params.mask_scales,
                params.mask_mode,
                params.mask_seed,
            )?;
            let mut acc: Option<Tensor> = None;
            let mut pairs = 0usize;
            for (mask, comp) in pool.pairs() {
                let tm = mask_to_tensor(mask, device)?;
                let tc = mask_to_tensor(comp, device)?;
                let backend = Error::tensor(Stage::Detector);
                let out_m = model.restore_batch(&x.broadcast_mul(&tm).map_err(backend)?)?;
                let backend = Error::tensor(Stage::Detector);
                let out_c = model.restore_batch(&x.broadcast_mul(&tc).map_err(backend)?)?;
                // Keep each pass's output only where that pass removed the
                // pixel: (1-M) selects M's removed region, and
                // (1-M) + (1-M̄) = 1 covers the image exactly once.
                let stitched = (|| -> candle_core::Result<Tensor> {
                    let part_m = out_m.broadcast_mul(&tm.affine(-1.0, 1.0)?)?;
                    let part_c = out_c.broadcast_mul(&tc.affine(-1.0, 1.0)?)?;
                    part_m + part_c
                })()
                .map_err(Error::tensor(Stage::Detector))?;
                acc = Some(match acc.take() {
                    None => stitched,
                    Some(prev) => (prev + stitched).map_err(Error::tensor(Stage::Detector))?,
                });
                pairs += 1;
            }
            let acc = acc.ok_or_else(|| {
                Error::state(Stage::Detector, "mask pool produced no complement pairs")
            })?;
            acc.affine(1.0 / pairs as f64, 0.0).map_err(Error::tensor(Stage::Detector))?
        }
    };

    let unit = restored
        .affine(0.5, 0.5)
        .and_then(|t| t.squeeze(0))
        .map_err(Error::tensor(Stage::Detector))?;
    ImagePatch::from_tensor(&unit, ValueRange::Unit)
}

/// Channel-averaged squared difference, computed in unit range.
pub fn error_map(image: &ImagePatch, restored: &ImagePatch) -> Result<ErrorMap> {
    if image.channels() != restored.channels()
        || image.height() != restored.height()
        || image.width() != restored.width()
    {
        return Err(Error::dimension(
            Stage::Detector,
            "error_map inputs must have identical shapes",
        ));
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let plane = h * w;
    let mut values = vec![0.0f64; plane];
    for ch in 0..c {
        let pa = image.plane(ch);
        let pb = restored.plane(ch);
        for i in 0..plane {
            let d = pa[i] as f64 - pb[i] as f64;
            values[i] += d * d;
        }
    }
    for v in &mut values {
        *v /= c as f64;
    }
    ErrorMap::new(h, w, values)
}

/// The full chain: restore, error map, bilateral smoothing, Otsu.
pub fn detect<R: Restorer + ?Sized>(
    model: &R,
    image: &ImagePatch,
    params: &DetectParams,
) -> Result<Detection> {
    let restored = restore(model, image, params)?;
    let error = error_map(image, &restored)?;
    let smoothed = smooth_bilateral(
        &error,
        params.bilateral_diameter,
        params.sigma_intensity,
        params.sigma_spatial,
    )?;
    let outcome = otsu_threshold(&smoothed)?;
    Ok(Detection {
        restored,
        error,
        smoothed,
        threshold: outcome.threshold,
        no_anomaly: outcome.no_anomaly,
        binary: outcome.binary,
    })
}

/// RGB overlay against ground truth: true positives green, false positives
/// blue, false negatives red, everything else the base image.
pub fn overlay(
    base: &ImagePatch,
    pred: &BinaryCrackMap,
    gt: &BinaryCrackMap,
) -> Result<ImagePatch> {
    let (h, w) = (pred.height(), pred.width());
    if gt.height() != h || gt.width() != w || base.height() != h || base.width() != w {
        return Err(Error::dimension(Stage::Detector, "overlay inputs must share dimensions"));
    }
    let mut out = ImagePatch::zeros(3, h, w, ValueRange::Unit);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb = match (pred.values()[i], gt.values()[i]) {
                (1, 1) => [0.0, 1.0, 0.0],
                (1, 0) => [0.0, 0.0, 1.0],
                (0, 1) => [1.0, 0.0, 0.0],
                _ => {
                    let gray = base.get(0, y, x);
                    if base.channels() == 3 {
                        [base.get(0, y, x), base.get(1, y, x), base.get(2, y, x)]
                    } else {
                        [gray, gray, gray]
                    }
                }
            };
            for (c, &v) in rgb.iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Smallest and largest values, or `None` when the map is constant or empty.
pub(crate) fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo < hi {
        Some((lo, hi))
    } else {
        None
    }
}

/// Min-max quantization to integer 8-bit levels.
pub(crate) fn quantize_u8(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let scale = 255.0 / (hi - lo);
    values.iter().map(|&v| ((v - lo) * scale).round() as u8).collect()
}
