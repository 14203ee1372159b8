//! Direct-formula reference implementations.
//!
//! Every numeric routine in this crate with any room for implementation
//! error (windowed SSIM, gradient-similarity pyramids, Gram losses,
//! bilateral smoothing, Otsu search, optimizer updates) is cross-checked in
//! the test suites against the routines here. These are deliberately naive:
//! scalar f64 loops written straight from the defining formulas, no tensor
//! backend, no shared code with the optimized paths. Constants are frozen
//! as literals so a drive-by change to either side breaks the comparison.
//!
//! Images are passed as planar CHW slices.

/// 2D normalized Gaussian window, row-major `size`×`size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut one_d: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = one_d.iter().sum();
    for v in &mut one_d {
        *v /= sum;
    }
    let mut win = vec![0.0; size * size];
    for (i, wi) in one_d.iter().enumerate() {
        for (j, wj) in one_d.iter().enumerate() {
            win[i * size + j] = wi * wj;
        }
    }
    win
}

/// Mean absolute difference over all elements.
pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    sum / a.len() as f64
}

/// Per-pixel mean over channels of the squared difference.
pub fn error_map(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let plane = height * width;
    let mut out = vec![0.0; plane];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..channels {
            let d = a[c * plane + i] - b[c * plane + i];
            acc += d * d;
        }
        *o = acc / channels as f64;
    }
    out
}

/// SSIM loss: mean over channels and pixels of `1 - SSIM(i,j)`.
///
/// Local statistics use an 11×11 Gaussian window (sigma 1.5) evaluated with
/// zero padding so the map covers the full H×W, and biased (uncentered)
/// variance estimates. Stabilizers are C1=(0.01)^2, C2=(0.03)^2 for
/// unit-range inputs.
pub fn ssim_loss(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> f64 {
    const WINDOW: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = gaussian_window(WINDOW, SIGMA);
    let half = WINDOW as isize / 2;
    let plane = height * width;

    let mut acc = 0.0;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let fetch = |img: &[f64], y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                0.0
            } else {
                img[y as usize * width + x as usize]
            }
        };
        for i in 0..height as isize {
            for j in 0..width as isize {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut ea, mut eb, mut eab) = (0.0, 0.0, 0.0);
                for u in -half..=half {
                    for v in -half..=half {
                        let w = win[(u + half) as usize * WINDOW + (v + half) as usize];
                        let va = fetch(pa, i + u, j + v);
                        let vb = fetch(pb, i + u, j + v);
                        mu_a += w * va;
                        mu_b += w * vb;
                        ea += w * va * va;
                        eb += w * vb * vb;
                        eab += w * va * vb;
                    }
                }
                let sigma_a = ea - mu_a * mu_a;
                let sigma_b = eb - mu_b * mu_b;
                let sigma_ab = eab - mu_a * mu_b;
                let ssim = ((2.0 * mu_a * mu_b + C1) * (2.0 * sigma_ab + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (sigma_a + sigma_b + C2));
                acc += 1.0 - ssim;
            }
        }
    }
    acc / (channels * plane) as f64
}

fn reflect(i: isize, n: usize) -> usize {
    // Reflection without repeating the edge sample: -1 -> 1, n -> n-2.
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Prewitt gradient magnitude of the channel-mean image, reflect padding,
/// 1/3-scaled kernels, with a tiny epsilon inside the square root so the
/// magnitude stays differentiable at zero gradient.
fn gradient_magnitude(img: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    const EPS: f64 = 1e-12;
    let plane = height * width;
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..channels).map(|c| img[c * plane + i]).sum::<f64>() / channels as f64)
        .collect();
    let mut out = vec![0.0; plane];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = gray[reflect(y + dy, height) * width + reflect(x + dx, width)];
                    // Horizontal kernel: +1/3 column on the left, -1/3 on the right.
                    if dx == -1 {
                        gx += v / 3.0;
                    } else if dx == 1 {
                        gx -= v / 3.0;
                    }
                    if dy == -1 {
                        gy += v / 3.0;
                    } else if dy == 1 {
                        gy -= v / 3.0;
                    }
                }
            }
            out[y as usize * width + x as usize] = (gx * gx + gy * gy + EPS).sqrt();
        }
    }
    out
}

/// Gradient-magnitude similarity map in (0, 1]; c = 170/255^2 for
/// unit-range inputs.
pub fn gms_map(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    const C: f64 = 170.0 / (255.0 * 255.0);
    let ga = gradient_magnitude(a, channels, height, width);
    let gb = gradient_magnitude(b, channels, height, width);
    ga.iter()
        .zip(&gb)
        .map(|(&x, &y)| (2.0 * x * y + C) / (x * x + y * y + C))
        .collect()
}

fn avg_pool2(img: &[f64], height: usize, width: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (height / 2, width / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            out[y * w2 + x] = (img[(2 * y) * width + 2 * x]
                + img[(2 * y) * width + 2 * x + 1]
                + img[(2 * y + 1) * width + 2 * x]
                + img[(2 * y + 1) * width + 2 * x + 1])
                / 4.0;
        }
    }
    (out, h2, w2)
}

/// Multi-scale GMS loss: mean over a 4-level pyramid (1, 1/2, 1/4, 1/8,
/// downscaled by 2×2 average pooling) of the mean of `1 - GMS`.
pub fn msgms_loss(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> f64 {
    let plane = height * width;
    let mut ca: Vec<Vec<f64>> = (0..channels).map(|c| a[c * plane..(c + 1) * plane].to_vec()).collect();
    let mut cb: Vec<Vec<f64>> = (0..channels).map(|c| b[c * plane..(c + 1) * plane].to_vec()).collect();
    let (mut h, mut w) = (height, width);
    let mut total = 0.0;
    for level in 0..4 {
        if level > 0 {
            for c in 0..channels {
                let (pa, hh, _) = avg_pool2(&ca[c], h, w);
                let (pb, _, ww) = avg_pool2(&cb[c], h, w);
                ca[c] = pa;
                cb[c] = pb;
                if c == channels - 1 {
                    h = hh;
                    w = ww;
                }
            }
        }
        let flat_a: Vec<f64> = ca.iter().flatten().copied().collect();
        let flat_b: Vec<f64> = cb.iter().flatten().copied().collect();
        let map = gms_map(&flat_a, &flat_b, channels, h, w);
        let mean_dissim: f64 = map.iter().map(|v| 1.0 - v).sum::<f64>() / map.len() as f64;
        total += mean_dissim;
    }
    total / 4.0
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Non-saturating adversarial losses from patch logits:
/// `d = mean bce(real->1) + mean bce(fake->0)`, `g = mean bce(fake->1)`.
pub fn adversarial_losses(real_logits: &[f64], fake_logits: &[f64]) -> (f64, f64) {
    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| it.sum::<f64>() / n as f64;
    let d_real = mean(&mut real_logits.iter().map(|&z| softplus(-z)), real_logits.len());
    let d_fake = mean(&mut fake_logits.iter().map(|&z| softplus(z)), fake_logits.len());
    let g = mean(&mut fake_logits.iter().map(|&z| softplus(-z)), fake_logits.len());
    (g, d_real + d_fake)
}

/// Zero-padded 2D convolution, weight layout (Cout, Cin, kh, kw).
pub fn conv2d(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (co, kh, kw): (usize, usize, usize),
    pad: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                acc += input[(i * h + y as usize) * w + x as usize]
                                    * weight[((o * ci + i) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2(input: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input[(ch * h + 2 * y + dy) * w + 2 * x + dx]);
                    }
                }
                out[(ch * oh + y) * ow + x] = m;
            }
        }
    }
    (out, oh, ow)
}

/// Gram matrix of a CHW feature map, normalized by C·H·W.
pub fn gram(feat: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let plane = h * w;
    let norm = (c * h * w) as f64;
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for p in 0..plane {
                acc += feat[i * plane + p] * feat[j * plane + p];
            }
            out[i * c + j] = acc / norm;
        }
    }
    out
}

/// One tapped layer: (features_a, features_b, (channels, height, width)).
pub type FeaturePair = (Vec<f64>, Vec<f64>, (usize, usize, usize));

/// Style loss over per-layer feature pairs: mean over layers of the mean
/// absolute Gram difference.
pub fn style_loss(layers: &[FeaturePair]) -> f64 {
    let mut total = 0.0;
    for (fa, fb, shape) in layers {
        let ga = gram(fa, *shape);
        let gb = gram(fb, *shape);
        let mean_abs: f64 =
            ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ga.len() as f64;
        total += mean_abs;
    }
    total / layers.len() as f64
}

/// Brute-force bilateral filter on the 8-bit quantization of a map.
///
/// Returns the filtered values in 8-bit units (not rounded). Square window
/// of side `diameter`, in-bounds neighbors only, Gaussian spatial and
/// intensity kernels.
pub fn bilateral_8bit(
    quantized: &[f64],
    height: usize,
    width: usize,
    diameter: usize,
    sigma_intensity: f64,
    sigma_spatial: f64,
) -> Vec<f64> {
    let radius = (diameter / 2) as isize;
    let mut out = vec![0.0; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let center = quantized[y as usize * width + x as usize];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let v = quantized[ny as usize * width + nx as usize];
                    let ws = (-((dy * dy + dx * dx) as f64)
                        / (2.0 * sigma_spatial * sigma_spatial))
                        .exp();
                    let wi = (-((v - center) * (v - center))
                        / (2.0 * sigma_intensity * sigma_intensity))
                        .exp();
                    num += ws * wi * v;
                    den += ws * wi;
                }
            }
            out[y as usize * width + x as usize] = num / den;
        }
    }
    out
}

/// Exhaustive Otsu search over a 256-bin histogram.
///
/// Returns the threshold maximizing between-class variance, ties broken
/// toward the lower level, or `None` when no split leaves both classes
/// non-empty.
pub fn otsu(hist: &[u64; 256]) -> Option<u8> {
    let mut best: Option<(u8, f64)> = None;
    for t in 0..=255usize {
        let mut n0 = 0u64;
        let mut n1 = 0u64;
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for (level, &count) in hist.iter().enumerate() {
            if level <= t {
                n0 += count;
                s0 += (level as f64) * count as f64;
            } else {
                n1 += count;
                s1 += (level as f64) * count as f64;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let mu0 = s0 / n0 as f64;
        let mu1 = s1 / n1 as f64;
        let var = (n0 as f64) * (n1 as f64) * (mu0 - mu1) * (mu0 - mu1);
        match best {
            Some((_, best_var)) if var <= best_var => {}
            _ => best = Some((t as u8, var)),
        }
    }
    best.map(|(t, _)| t)
}

/// Scalar Adam update; returns the new (param, m, v).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: f64,
    grad: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> (f64, f64, f64) {
    let m = beta1 * m + (1.0 - beta1) * grad;
    let v = beta2 * v + (1.0 - beta2) * grad * grad;
    let m_hat = m / (1.0 - beta1.powi(t as i32));
    let v_hat = v / (1.0 - beta2.powi(t as i32));
    (param - lr * m_hat / (v_hat.sqrt() + eps), m, v)
}

/// Output length of a strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Pixel-wise confusion counts (crack = positive); returns (tp, fp, tn, fn).
pub fn confusion(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    (tp, fp, tn, fn_)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let win = gaussian_window(11, 1.5);
        let sum: f64 = win.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((win[0] - win[11 * 11 - 1]).abs() < 1e-15);
        assert!(win[5 * 11 + 5] > win[0]);
    }

    #[test]
    fn ssim_of_identical_images_is_zero() {
        let img: Vec<f64> = (0..3 * 16 * 16).map(|i| (i % 97) as f64 / 97.0).collect();
        assert!(ssim_loss(&img, &img, 3, 16, 16).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_high_contrast_image_exceeds_one() {
        // Anticorrelated structure drives SSIM toward -1, the loss toward 2.
        let mut a = vec![0.0; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                a[y * 32 + x] = ((x / 4 + y / 4) % 2) as f64;
            }
        }
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let loss = ssim_loss(&a, &b, 1, 32, 32);
        assert!(loss > 1.0, "loss = {loss}");
    }

    #[test]
    fn gms_of_identical_images_is_all_ones() {
        let img: Vec<f64> = (0..8 * 8).map(|i| (i * 7 % 13) as f64 / 13.0).collect();
        for v in gms_map(&img, &img, 1, 8, 8) {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gms_of_constant_images_is_all_ones() {
        let a = vec![0.5; 64];
        let b = vec![0.2; 64];
        for v in gms_map(&a, &b, 1, 8, 8) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gms_penalizes_an_edge_against_flat() {
        let mut a = vec![0.0; 8 * 8];
        for y in 0..8 {
            for x in 4..8 {
                a[y * 8 + x] = 1.0;
            }
        }
        let b = vec![0.0; 8 * 8];
        let map = gms_map(&a, &b, 1, 8, 8);
        // Interior pixels adjacent to the vertical edge must score below 1.
        assert!(map[3 * 8 + 4] < 0.5, "edge pixel score {}", map[3 * 8 + 4]);
        // Far from the edge both gradients vanish and the score returns to 1.
        assert!((map[3 * 8 + 1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn msgms_of_identical_images_is_zero() {
        let img: Vec<f64> = (0..3 * 16 * 16).map(|i| (i % 31) as f64 / 31.0).collect();
        assert!(msgms_loss(&img, &img, 3, 16, 16).abs() < 1e-12);
    }

    #[test]
    fn adversarial_closed_forms() {
        let zeros = vec![0.0; 9];
        let (g, d) = adversarial_losses(&zeros, &zeros);
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);

        let real = vec![40.0; 9];
        let fake = vec![-40.0; 9];
        let (_, d) = adversarial_losses(&real, &fake);
        assert!(d < 1e-12);
    }

    #[test]
    fn gram_of_constant_feature_map() {
        let feat = vec![0.5; 4 * 6];
        let g = gram(&feat, (1, 4, 6));
        assert_eq!(g.len(), 1);
        assert!((g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn otsu_bimodal_splits_between_modes() {
        let mut hist = [0u64; 256];
        hist[10] = 900;
        hist[200] = 100;
        let t = otsu(&hist).unwrap();
        assert!((10..200).contains(&t), "threshold {t}");
    }

    #[test]
    fn otsu_single_level_has_no_split() {
        let mut hist = [0u64; 256];
        hist[42] = 1000;
        assert_eq!(otsu(&hist), None);
    }

    #[test]
    fn conv_out_len_matches_the_patch_discriminator_stack() {
        // Three stride-2 blocks then two stride-1 blocks, 4x4 kernels, pad 1.
        let mut size = 256;
        for stride in [2, 2, 2, 1, 1] {
            size = conv_out_len(size, 4, stride, 1);
        }
        assert_eq!(size, 30);
    }

    #[test]
    fn bilateral_constant_input_is_fixed_point() {
        let q = vec![120.0; 81];
        let out = bilateral_8bit(&q, 9, 9, 9, 75.0, 75.0);
        for v in out {
            assert!((v - 120.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bilateral_attenuates_an_outlier_pixel() {
        // A single bright pixel with small sigma_intensity: neighbors are far
        // in intensity so they get almost no weight at the bright pixel, and
        // the bright pixel gets almost no weight at its neighbors.
        let mut q = vec![10.0; 81];
        q[4 * 9 + 4] = 250.0;
        let out = bilateral_8bit(&q, 9, 9, 3, 10.0, 75.0);
        assert!(out[4 * 9 + 4] > 240.0, "center keeps mostly itself: {}", out[4 * 9 + 4]);
        assert!((out[4 * 9 + 3] - 10.0).abs() < 1.0, "background stays near 10");
        // With a large sigma_intensity the outlier is averaged down.
        let smoothed = bilateral_8bit(&q, 9, 9, 3, 1000.0, 75.0);
        assert!(smoothed[4 * 9 + 4] < 100.0);
    }
}
