//! Gradient-magnitude similarity map and its multi-scale loss.
//!
//! Gradients are Prewitt responses (1/3-scaled 3×3 kernels) of the
//! channel-mean image with reflect padding. The similarity constant is
//! 170/255^2, the classic value rescaled to unit-range inputs. A tiny
//! epsilon inside the magnitude square root keeps the loss differentiable
//! where a gradient vanishes exactly.

use candle_core::Tensor;

use crate::error::{Error, Result, Stage};

use super::check_same_shape;

const GMS_C: f64 = 170.0 / (255.0 * 255.0);
const GRAD_EPS: f64 = 1e-12;
const PYRAMID_LEVELS: usize = 4;

/// Reflect-pad by one pixel on both spatial dims (no edge repetition).
fn reflect_pad1(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let top = x.narrow(2, 1, 1)?;
    let bottom = x.narrow(2, h - 2, 1)?;
    let x = Tensor::cat(&[&top, x, &bottom], 2)?;
    let left = x.narrow(3, 1, 1)?;
    let right = x.narrow(3, w - 2, 1)?;
    Tensor::cat(&[&left, &x, &right], 3)
}

/// Prewitt gradient magnitude of the channel mean, shape (N, 1, H, W).
fn gradient_magnitude(x: &Tensor) -> candle_core::Result<Tensor> {
    let device = x.device();
    let third = 1.0 / 3.0;
    #[rustfmt::skip]
    let kernels: Vec<f64> = vec![
        // horizontal response: +1/3 left column, -1/3 right column
        third, 0.0, -third,
        third, 0.0, -third,
        third, 0.0, -third,
        // vertical response: +1/3 top row, -1/3 bottom row
        third, third, third,
        0.0, 0.0, 0.0,
        -third, -third, -third,
    ];
    let weight = Tensor::from_vec(kernels, (2, 1, 3, 3), device)?.to_dtype(x.dtype())?;

    let gray = x.mean_keepdim(1)?;
    let padded = reflect_pad1(&gray)?;
    let grads = padded.conv2d(&weight, 0, 1, 1, 1)?;
    let gx = grads.narrow(1, 0, 1)?;
    let gy = grads.narrow(1, 1, 1)?;
    ((gx.sqr()? + gy.sqr()?)?.affine(1.0, GRAD_EPS))?.sqrt()
}

/// Gradient-magnitude similarity map in (0, 1], shape (N, 1, H, W).
pub fn gms_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let (_, _, h, w) = a.dims4().map_err(Error::tensor(Stage::Losses))?;
    if h < 2 || w < 2 {
        return Err(Error::dimension(
            Stage::Losses,
            format!("image {h}x{w} is too small for 3x3 gradients"),
        ));
    }
    let inner = || -> candle_core::Result<Tensor> {
        let ga = gradient_magnitude(a)?;
        let gb = gradient_magnitude(b)?;
        let num = (&ga * &gb)?.affine(2.0, GMS_C)?;
        let den = (ga.sqr()? + gb.sqr()?)?.affine(1.0, GMS_C)?;
        num / den
    };
    inner().map_err(Error::tensor(Stage::Losses))
}

/// Multi-scale GMS loss: mean over a 4-level pyramid (2×2 average pooling
/// between levels) of the per-level mean of `1 - GMS`.
pub fn msgms_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let (_, _, h, w) = a.dims4().map_err(Error::tensor(Stage::Losses))?;
    let factor = 1 << (PYRAMID_LEVELS - 1);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::dimension(
            Stage::Losses,
            format!("spatial dims {h}x{w} must be divisible by {factor} for the GMS pyramid"),
        ));
    }
    let mut level_a = a.clone();
    let mut level_b = b.clone();
    let mut total: Option<Tensor> = None;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            level_a = level_a.avg_pool2d(2).map_err(Error::tensor(Stage::Losses))?;
            level_b = level_b.avg_pool2d(2).map_err(Error::tensor(Stage::Losses))?;
        }
        let map = gms_map(&level_a, &level_b)?;
        let dissim = map
            .affine(-1.0, 1.0)
            .and_then(|d| d.mean_all())
            .map_err(Error::tensor(Stage::Losses))?;
        total = Some(match total.take() {
            None => dissim,
            Some(acc) => (acc + dissim).map_err(Error::tensor(Stage::Losses))?,
        });
    }
    total
        .expect("at least one pyramid level")
        .affine(1.0 / PYRAMID_LEVELS as f64, 0.0)
        .map_err(Error::tensor(Stage::Losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::scalar_f64;
    use crate::reference;
    use candle_core::{DType, Device};
    use rand::Rng;

    fn tensor_pair(c: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor, Vec<f64>, Vec<f64>) {
        let mut rng = crate::rng::rng_for(seed, "gms_test", &[]);
        let a: Vec<f64> = (0..c * h * w).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..c * h * w).map(|_| rng.gen::<f64>()).collect();
        let ta = Tensor::from_vec(a.clone(), (1, c, h, w), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b.clone(), (1, c, h, w), &Device::Cpu).unwrap();
        (ta, tb, a, b)
    }

    #[test]
    fn gms_map_matches_reference_on_random_inputs() {
        for seed in 0..50 {
            let (ta, tb, a, b) = tensor_pair(3, 8, 8, seed);
            let got: Vec<f64> = gms_map(&ta, &tb)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let want = reference::gms_map(&a, &b, 3, 8, 8);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-9), "seed {seed} px {i}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn msgms_matches_reference_on_random_inputs() {
        for seed in 0..50 {
            let (ta, tb, a, b) = tensor_pair(3, 16, 16, seed + 100);
            let got = scalar_f64(&msgms_loss(&ta, &tb).unwrap()).unwrap();
            let want = reference::msgms_loss(&a, &b, 3, 16, 16);
            assert!(
                (got - want).abs() <= 1e-6 * want.abs().max(1e-9),
                "seed {seed}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn identical_and_constant_inputs_give_unit_similarity() {
        let (ta, _, _, _) = tensor_pair(3, 16, 16, 5);
        let map = gms_map(&ta, &ta).unwrap();
        let min = scalar_f64(&map.min_all().unwrap()).unwrap();
        assert!((min - 1.0).abs() < 1e-9);
        assert!(scalar_f64(&msgms_loss(&ta, &ta).unwrap()).unwrap().abs() < 1e-12);

        let flat_a = Tensor::full(0.7f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let flat_b = Tensor::full(0.2f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let map = gms_map(&flat_a, &flat_b).unwrap();
        let min = scalar_f64(&map.min_all().unwrap()).unwrap();
        assert!((min - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gms_values_stay_in_unit_interval() {
        for seed in 200..210 {
            let (ta, tb, _, _) = tensor_pair(1, 16, 16, seed);
            let map = gms_map(&ta, &tb).unwrap();
            let max = scalar_f64(&map.max_all().unwrap()).unwrap();
            let min = scalar_f64(&map.min_all().unwrap()).unwrap();
            assert!(max <= 1.0 + 1e-12);
            assert!(min > 0.0);
        }
    }

    #[test]
    fn pyramid_divisibility_is_enforced() {
        let a = Tensor::zeros((1, 1, 20, 20), DType::F64, &Device::Cpu).unwrap();
        assert!(msgms_loss(&a, &a).is_err());
        let b = Tensor::zeros((1, 1, 24, 24), DType::F64, &Device::Cpu).unwrap();
        assert!(msgms_loss(&b, &b).is_ok());
    }

    #[test]
    fn edge_versus_flat_is_penalized_at_the_edge() {
        let mut a = vec![0.0f64; 64];
        for y in 0..8 {
            for x in 4..8 {
                a[y * 8 + x] = 1.0;
            }
        }
        let ta = Tensor::from_vec(a, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let tb = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let map: Vec<f64> = gms_map(&ta, &tb).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(map[3 * 8 + 4] < 0.5);
        assert!((map[3 * 8 + 1] - 1.0).abs() < 1e-6);
    }
}
