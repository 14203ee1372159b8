//! Windowed SSIM loss.
//!
//! Local statistics come from an 11×11 Gaussian window (sigma 1.5) applied
//! per channel as a zero-padded convolution, so the SSIM map covers the
//! full H×W including borders; the loss is the mean of `1 - SSIM` over all
//! pixels and channels. Variances are the biased `E[x^2] - E[x]^2` form.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result, Stage};

use super::check_same_shape;

pub(crate) const WINDOW_SIZE: usize = 11;
pub(crate) const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 2D Gaussian window as a (1, 1, size, size) kernel.
fn window_kernel(dtype: DType, device: &candle_core::Device) -> candle_core::Result<Tensor> {
    let center = (WINDOW_SIZE as f64 - 1.0) / 2.0;
    let mut one_d: Vec<f64> = (0..WINDOW_SIZE)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let sum: f64 = one_d.iter().sum();
    for v in &mut one_d {
        *v /= sum;
    }
    let mut two_d = Vec::with_capacity(WINDOW_SIZE * WINDOW_SIZE);
    for wi in &one_d {
        for wj in &one_d {
            two_d.push(wi * wj);
        }
    }
    Tensor::from_vec(two_d, (1, 1, WINDOW_SIZE, WINDOW_SIZE), device)?.to_dtype(dtype)
}

/// Per-channel zero-padded convolution with a single-channel kernel.
///
/// The backend's convolution gradient only supports ungrouped kernels, so
/// channels are folded into the batch dimension instead of using groups.
pub(crate) fn conv_per_channel(x: &Tensor, kernel: &Tensor, pad: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let folded = x.reshape((n * c, 1, h, w))?;
    let out = folded.conv2d(kernel, pad, 1, 1, 1)?;
    let (_, _, oh, ow) = out.dims4()?;
    out.reshape((n, c, oh, ow))
}

/// SSIM loss: mean over pixels and channels of `1 - SSIM`.
pub fn ssim_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let (_, _, h, w) = a.dims4().map_err(Error::tensor(Stage::Losses))?;
    if h < WINDOW_SIZE || w < WINDOW_SIZE {
        return Err(Error::dimension(
            Stage::Losses,
            format!("image {h}x{w} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window"),
        ));
    }
    let inner = || -> candle_core::Result<Tensor> {
        let pad = WINDOW_SIZE / 2;
        let win = window_kernel(a.dtype(), a.device())?;
        let c1 = K1 * K1;
        let c2 = K2 * K2;

        let mu_a = conv_per_channel(a, &win, pad)?;
        let mu_b = conv_per_channel(b, &win, pad)?;
        let mu_aa = mu_a.sqr()?;
        let mu_bb = mu_b.sqr()?;
        let mu_ab = (&mu_a * &mu_b)?;
        let sigma_a = (conv_per_channel(&a.sqr()?, &win, pad)? - &mu_aa)?;
        let sigma_b = (conv_per_channel(&b.sqr()?, &win, pad)? - &mu_bb)?;
        let sigma_ab = (conv_per_channel(&(a * b)?, &win, pad)? - &mu_ab)?;

        let num = (mu_ab.affine(2.0, c1)? * sigma_ab.affine(2.0, c2)?)?;
        let den = (((mu_aa + mu_bb)?.affine(1.0, c1)?) * ((sigma_a + sigma_b)?.affine(1.0, c2)?))?;
        let ssim_map = (num / den)?;
        ssim_map.mean_all()?.affine(-1.0, 1.0)
    };
    inner().map_err(Error::tensor(Stage::Losses))
}
