//! Trainable layer primitives.
//!
//! Weights live in `candle` `Var`s so gradients accumulate against them;
//! batch-norm running statistics are plain tensors behind a `RefCell` (they
//! are updated during training forwards but never optimized). All random
//! numbers come from caller-provided [`rand_chacha::ChaCha8Rng`] streams,
//! never from a global generator, which is what makes runs replayable.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result, Stage};

/// Standard deviation of the Gaussian weight init.
pub(crate) const INIT_STD: f64 = 0.02;
/// Batch-norm running-average momentum.
pub(crate) const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance stabilizer.
pub(crate) const BN_EPS: f64 = 1e-5;

fn backend(e: candle_core::Error) -> Error {
    Error::tensor(Stage::Model)(e)
}

/// Gaussian-initialized tensor drawn from the given stream.
fn normal_init(
    shape: &[usize],
    std: f64,
    rng: &mut ChaCha8Rng,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std as f32)
        .map_err(|e| Error::argument(Stage::Model, format!("bad init std: {e}")))?;
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(data, shape, device).map_err(backend)
}

/// Strided 2-D convolution, kernel layout (out, in, k, k).
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        let weight = normal_init(&[out_channels, in_channels, kernel, kernel], INIT_STD, rng, device)?;
        let bias = if with_bias {
            Some(Var::zeros(out_channels, DType::F32, device).map_err(backend)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight: Var::from_tensor(&weight).map_err(backend)?,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let inner = || -> candle_core::Result<Tensor> {
            let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
            match &self.bias {
                None => Ok(y),
                Some(b) => {
                    let out_c = b.as_tensor().dim(0)?;
                    y.broadcast_add(&b.as_tensor().reshape((1, out_c, 1, 1))?)
                }
            }
        };
        inner().map_err(backend)
    }

    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }
}

/// Strided 2-D transposed convolution, kernel layout (in, out, k, k).
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        let weight = normal_init(&[in_channels, out_channels, kernel, kernel], INIT_STD, rng, device)?;
        let bias = if with_bias {
            Some(Var::zeros(out_channels, DType::F32, device).map_err(backend)?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight: Var::from_tensor(&weight).map_err(backend)?,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let inner = || -> candle_core::Result<Tensor> {
            let y =
                x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
            match &self.bias {
                None => Ok(y),
                Some(b) => {
                    let out_c = b.as_tensor().dim(0)?;
                    y.broadcast_add(&b.as_tensor().reshape((1, out_c, 1, 1))?)
                }
            }
        };
        inner().map_err(backend)
    }

    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }
}

/// Batch normalization over (N, H, W) per channel.
///
/// Training mode normalizes with biased batch statistics and folds them
/// into the running averages (unbiased variance, matching the common
/// framework convention); eval mode normalizes with the running averages.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: RefCell<Tensor>,
    running_var: RefCell<Tensor>,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize, device: &Device) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Var::ones(channels, DType::F32, device).map_err(backend)?,
            beta: Var::zeros(channels, DType::F32, device).map_err(backend)?,
            running_mean: RefCell::new(
                Tensor::zeros(channels, DType::F32, device).map_err(backend)?,
            ),
            running_var: RefCell::new(
                Tensor::ones(channels, DType::F32, device).map_err(backend)?,
            ),
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        let inner = || -> candle_core::Result<Tensor> {
            let (n, xc, h, w) = x.dims4()?;
            if xc != c {
                candle_core::bail!("batch norm got {xc} channels, expected {c}");
            }
            let (mean, var) = if train {
                // Biased variance for normalization; moments over N, H, W.
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;

                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let new_mean = self
                    .running_mean
                    .borrow()
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&mean.detach().reshape(c)?.affine(BN_MOMENTUM, 0.0)?)?;
                let new_var = self
                    .running_var
                    .borrow()
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&var.detach().reshape(c)?.affine(BN_MOMENTUM * unbias, 0.0)?)?;
                // Detached so successive updates do not chain op history.
                *self.running_mean.borrow_mut() = new_mean.detach();
                *self.running_var.borrow_mut() = new_var.detach();
                (mean, var)
            } else {
                (
                    self.running_mean.borrow().reshape((1, c, 1, 1))?,
                    self.running_var.borrow().reshape((1, c, 1, 1))?,
                )
            };
            let x_hat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
            x_hat
                .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
                .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)
        };
        inner().map_err(backend)
    }

    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    /// Running statistics, cloned out of their cells.
    pub fn buffers(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("running_mean", self.running_mean.borrow().clone()),
            ("running_var", self.running_var.borrow().clone()),
        ]
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let dim = value.dims1().map_err(backend)?;
        if dim != self.channels {
            return Err(Error::dimension(
                Stage::Model,
                format!("buffer {name} has {dim} channels, expected {}", self.channels),
            ));
        }
        match name {
            "running_mean" => *self.running_mean.borrow_mut() = value,
            "running_var" => *self.running_var.borrow_mut() = value,
            other => {
                return Err(Error::argument(Stage::Model, format!("unknown buffer '{other}'")))
            }
        }
        Ok(())
    }
}

/// `max(x, slope*x)`; equals ReLU at slope 0.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.affine(slope, 0.0).and_then(|s| x.maximum(&s)).map_err(backend)
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate) so eval needs no rescaling.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::argument(Stage::Model, format!("dropout rate {rate} outside [0,1)")));
    }
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let n = x.elem_count();
    let keep_scale = (1.0 / (1.0 - rate)) as f32;
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
        .collect();
    let inner = || -> candle_core::Result<Tensor> {
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        x.broadcast_mul(&mask)
    };
    inner().map_err(backend)
}
