//! Restoration and adversarial losses.
//!
//! All pairwise losses take NCHW tensors in unit range [0,1]; generator
//! outputs must be mapped back from signed range before scoring so the
//! SSIM/GMS stabilizer constants keep their standard meaning. Every loss
//! here is cross-checked against [`crate::reference`] in the tests.
//!
//! Loss functions are dtype-generic (f32 for training, f64 for the
//! finite-difference gradient checks).

mod gms;
mod ssim;
mod style;

pub use gms::{gms_map, msgms_loss};
pub use ssim::ssim_loss;
pub use style::{style_loss, StyleExtractor, StyleLayer, StyleLayerSpec};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result, Stage};

/// Balancing weights; the defaults are the training configuration the rest
/// of the crate assumes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_mae: f64,
    pub lambda_ssim: f64,
    pub lambda_gms: f64,
    pub lambda_style: f64,
    pub lambda_res: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mae: 1.0,
            lambda_ssim: 1.0,
            lambda_gms: 1.0,
            lambda_style: 10.0,
            lambda_res: 100.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_mae", self.lambda_mae),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_gms", self.lambda_gms),
            ("lambda_style", self.lambda_style),
            ("lambda_res", self.lambda_res),
            ("lambda_adv", self.lambda_adv),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::argument(
                    Stage::Losses,
                    format!("{name} must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Scalar values of every component for one step or epoch.
///
/// Component fields hold the raw (unweighted) loss values; `restoration` and
/// `total` hold the weighted combinations.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub mae: f64,
    pub ssim: f64,
    pub msgms: f64,
    pub style: f64,
    pub restoration: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combine raw component values under the given weights.
    pub fn compose(
        mae: f64,
        ssim: f64,
        msgms: f64,
        style: f64,
        adversarial_g: f64,
        adversarial_d: f64,
        weights: &LossWeights,
    ) -> LossBreakdown {
        let restoration = weights.lambda_mae * mae
            + weights.lambda_ssim * ssim
            + weights.lambda_gms * msgms
            + weights.lambda_style * style;
        LossBreakdown {
            mae,
            ssim,
            msgms,
            style,
            restoration,
            adversarial_g,
            adversarial_d,
            total: weights.lambda_res * restoration + weights.lambda_adv * adversarial_g,
        }
    }

    /// Mean of several breakdowns (used for per-epoch aggregation).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.mae += it.mae;
            acc.ssim += it.ssim;
            acc.msgms += it.msgms;
            acc.style += it.style;
            acc.restoration += it.restoration;
            acc.adversarial_g += it.adversarial_g;
            acc.adversarial_d += it.adversarial_d;
            acc.total += it.total;
        }
        acc.mae /= n;
        acc.ssim /= n;
        acc.msgms /= n;
        acc.style /= n;
        acc.restoration /= n;
        acc.adversarial_g /= n;
        acc.adversarial_d /= n;
        acc.total /= n;
        acc
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dimension(
            Stage::Losses,
            format!("shapes {:?} and {:?} differ", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

pub(crate) fn scalar_f64(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.to_scalar::<f64>())
        .map_err(Error::tensor(Stage::Losses))
}

/// Mean absolute difference over all elements.
pub fn mae_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    (a - b)
        .and_then(|d| d.abs())
        .and_then(|d| d.mean_all())
        .map_err(Error::tensor(Stage::Losses))
}

/// Numerically stable softplus: `max(x,0) + ln(1 + exp(-|x|))`.
fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let relu = x.relu()?;
    let ln_term = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    relu + ln_term
}

/// Non-saturating adversarial losses from patch logit maps.
///
/// `d_loss = mean bce(real -> 1) + mean bce(fake -> 0)`;
/// `g_loss = mean bce(fake -> 1)`. BCE operates on logits through the
/// stable softplus form.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same_shape(real_logits, fake_logits)?;
    let inner = || -> candle_core::Result<(Tensor, Tensor)> {
        let d_real = softplus(&real_logits.neg()?)?.mean_all()?;
        let d_fake = softplus(fake_logits)?.mean_all()?;
        let g = softplus(&fake_logits.neg()?)?.mean_all()?;
        Ok((g, (d_real + d_fake)?))
    };
    inner().map_err(Error::tensor(Stage::Losses))
}

/// Weighted generator objective.
///
/// `restored` and `original` must be unit-range NCHW batches. Components
/// with weight zero are skipped entirely, which makes ablation toggles
/// bit-identical to never computing the term. The style term requires an
/// extractor; the adversarial term requires fake logits.
///
/// Returns the total loss tensor (for backprop) plus the scalar breakdown.
pub fn total_generator_loss(
    restored: &Tensor,
    original: &Tensor,
    fake_logits: Option<&Tensor>,
    weights: &LossWeights,
    extractor: Option<&StyleExtractor>,
) -> Result<(Tensor, LossBreakdown)> {
    check_same_shape(restored, original)?;
    weights.validate()?;
    let backend = Error::tensor(Stage::Losses);

    let mut raw = [0.0f64; 4];
    let mut restoration: Option<Tensor> = None;
    let add = |acc: &mut Option<Tensor>, term: Tensor, weight: f64| -> Result<Tensor> {
        let weighted = term.affine(weight, 0.0).map_err(Error::tensor(Stage::Losses))?;
        Ok(match acc.take() {
            None => weighted,
            Some(prev) => (prev + weighted).map_err(Error::tensor(Stage::Losses))?,
        })
    };

    if weights.lambda_mae > 0.0 {
        let term = mae_loss(restored, original)?;
        raw[0] = finite(scalar_f64(&term)?, "mae")?;
        restoration = Some(add(&mut restoration, term, weights.lambda_mae)?);
    }
    if weights.lambda_ssim > 0.0 {
        let term = ssim_loss(restored, original)?;
        raw[1] = finite(scalar_f64(&term)?, "ssim")?;
        restoration = Some(add(&mut restoration, term, weights.lambda_ssim)?);
    }
    if weights.lambda_gms > 0.0 {
        let term = msgms_loss(restored, original)?;
        raw[2] = finite(scalar_f64(&term)?, "msgms")?;
        restoration = Some(add(&mut restoration, term, weights.lambda_gms)?);
    }
    if weights.lambda_style > 0.0 {
        let Some(extractor) = extractor else {
            return Err(Error::config(
                "style loss is enabled (lambda_style > 0) but no style extractor is loaded; \
                 set style_weights_path to a weights container or run with no_style",
            ));
        };
        let term = style::style_loss(restored, original, extractor)?;
        raw[3] = finite(scalar_f64(&term)?, "style")?;
        restoration = Some(add(&mut restoration, term, weights.lambda_style)?);
    }

    let device = restored.device();
    let zero = || Tensor::zeros((), restored.dtype(), device).map_err(Error::tensor(Stage::Losses));
    let restoration = match restoration {
        Some(t) => t,
        None => zero()?,
    };

    let mut adv_g_raw = 0.0;
    let mut total = restoration.affine(weights.lambda_res, 0.0).map_err(backend)?;
    if weights.lambda_adv > 0.0 {
        let Some(fake_logits) = fake_logits else {
            return Err(Error::argument(
                Stage::Losses,
                "adversarial weight is nonzero but no fake logits were supplied",
            ));
        };
        let g = softplus(&fake_logits.neg().map_err(Error::tensor(Stage::Losses))?)
            .and_then(|t| t.mean_all())
            .map_err(Error::tensor(Stage::Losses))?;
        adv_g_raw = finite(scalar_f64(&g)?, "adversarial_g")?;
        total = (total + g.affine(weights.lambda_adv, 0.0).map_err(Error::tensor(Stage::Losses))?)
            .map_err(Error::tensor(Stage::Losses))?;
    }

    let breakdown =
        LossBreakdown::compose(raw[0], raw[1], raw[2], raw[3], adv_g_raw, 0.0, weights);
    Ok((total, breakdown))
}

fn finite(v: f64, component: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(Stage::Losses, component, format!(" (value {v})")))
    }
}
