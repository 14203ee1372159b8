//! Gram-matrix style loss over a frozen convolutional feature extractor.
//!
//! The extractor is a plain conv/relu/maxpool stack loaded from a weights
//! container (see [`crate::container`]); tap indices select which layer
//! outputs contribute Gram matrices. [`StyleExtractor::vgg16_spec`]
//! describes the expected architecture for converted VGG-16 weights, but
//! any stack in the same format works, which is how the tests build small
//! extractors with known weights.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{Container, TensorEntry};
use crate::error::{Error, Result, Stage};

use super::check_same_shape;

/// Architecture description of one extractor layer (weights stored apart).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StyleLayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    Relu,
    MaxPool,
}

/// One extractor layer with its frozen weights.
#[derive(Debug, Clone)]
pub enum StyleLayer {
    /// Weight layout (out, in, k, k); bias (out).
    Conv { weight: Tensor, bias: Tensor, padding: usize },
    Relu,
    MaxPool,
}

impl StyleLayer {
    fn spec(&self) -> Result<StyleLayerSpec> {
        Ok(match self {
            StyleLayer::Conv { weight, padding, .. } => {
                let (out_channels, in_channels, kernel, _) =
                    weight.dims4().map_err(Error::tensor(Stage::Losses))?;
                StyleLayerSpec::Conv { in_channels, out_channels, kernel, padding: *padding }
            }
            StyleLayer::Relu => StyleLayerSpec::Relu,
            StyleLayer::MaxPool => StyleLayerSpec::MaxPool,
        })
    }
}

/// Frozen feature extractor with Gram tap points and input normalization.
#[derive(Debug, Clone)]
pub struct StyleExtractor {
    layers: Vec<StyleLayer>,
    taps: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl StyleExtractor {
    /// Build from layers with weights already in place.
    ///
    /// `taps` are indices into `layers`; the output *after* that layer feeds
    /// a Gram matrix. `mean`/`std` are per-channel statistics applied to the
    /// unit-range input before the first layer.
    pub fn new(
        layers: Vec<StyleLayer>,
        taps: Vec<usize>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        if layers.is_empty() || taps.is_empty() {
            return Err(Error::argument(
                Stage::Losses,
                "a style extractor needs at least one layer and one tap",
            ));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= layers.len()) {
            return Err(Error::argument(
                Stage::Losses,
                format!("tap index {bad} exceeds the {} layers", layers.len()),
            ));
        }
        let first_in = layers
            .iter()
            .find_map(|l| match l {
                StyleLayer::Conv { weight, .. } => weight.dims4().ok().map(|d| d.1),
                _ => None,
            })
            .ok_or_else(|| Error::argument(Stage::Losses, "extractor has no convolution layer"))?;
        if mean.len() != first_in || std.len() != first_in {
            return Err(Error::argument(
                Stage::Losses,
                format!("normalization stats must have {first_in} channels"),
            ));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::argument(Stage::Losses, "normalization std must be positive"));
        }
        Ok(StyleExtractor { layers, taps, mean, std })
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Input channel count expected by the first convolution.
    pub fn input_channels(&self) -> usize {
        self.mean.len()
    }

    /// The VGG-16 stack through relu4_3, with taps on the relu outputs of
    /// the 2nd, 4th, 7th and 10th convolutions, and the usual large-corpus
    /// RGB normalization statistics. Converted weights must follow this
    /// layer order with tensors named `layer{i}.weight` / `layer{i}.bias`.
    pub fn vgg16_spec() -> (Vec<StyleLayerSpec>, Vec<usize>, Vec<f64>, Vec<f64>) {
        use StyleLayerSpec::{Conv, MaxPool, Relu};
        let conv = |i, o| Conv { in_channels: i, out_channels: o, kernel: 3, padding: 1 };
        let layers = vec![
            conv(3, 64), Relu, conv(64, 64), Relu,           // taps: 3
            MaxPool,
            conv(64, 128), Relu, conv(128, 128), Relu,       // taps: 8
            MaxPool,
            conv(128, 256), Relu, conv(256, 256), Relu, conv(256, 256), Relu, // taps: 15
            MaxPool,
            conv(256, 512), Relu, conv(512, 512), Relu, conv(512, 512), Relu, // taps: 22
        ];
        let taps = vec![3, 8, 15, 22];
        let mean = vec![0.485, 0.456, 0.406];
        let std = vec![0.229, 0.224, 0.225];
        (layers, taps, mean, std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let specs: Vec<StyleLayerSpec> =
            self.layers.iter().map(|l| l.spec()).collect::<Result<_>>()?;
        let meta = serde_json::json!({
            "kind": "style_extractor",
            "layers": specs,
            "taps": self.taps,
            "mean": self.mean,
            "std": self.std,
        });
        let mut container = Container::new(meta);
        for (i, layer) in self.layers.iter().enumerate() {
            if let StyleLayer::Conv { weight, bias, .. } = layer {
                container.insert(
                    format!("layer{i}.weight"),
                    TensorEntry::from_tensor(weight, Stage::Losses)?,
                );
                container
                    .insert(format!("layer{i}.bias"), TensorEntry::from_tensor(bias, Stage::Losses)?);
            }
        }
        container.write(path, Stage::Losses)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let container = Container::read(path, Stage::Losses)?;
        if container.meta["kind"] != "style_extractor" {
            return Err(Error::state(
                Stage::Losses,
                format!("{}: container is not a style extractor", path.display()),
            ));
        }
        let parse = |field: &str| -> Result<serde_json::Value> {
            container
                .meta
                .get(field)
                .cloned()
                .ok_or_else(|| Error::state(Stage::Losses, format!("style meta lacks '{field}'")))
        };
        let specs: Vec<StyleLayerSpec> = serde_json::from_value(parse("layers")?)
            .map_err(|e| Error::state(Stage::Losses, format!("bad layer specs: {e}")))?;
        let taps: Vec<usize> = serde_json::from_value(parse("taps")?)
            .map_err(|e| Error::state(Stage::Losses, format!("bad taps: {e}")))?;
        let mean: Vec<f64> = serde_json::from_value(parse("mean")?)
            .map_err(|e| Error::state(Stage::Losses, format!("bad mean: {e}")))?;
        let std: Vec<f64> = serde_json::from_value(parse("std")?)
            .map_err(|e| Error::state(Stage::Losses, format!("bad std: {e}")))?;

        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(match spec {
                StyleLayerSpec::Conv { in_channels, out_channels, kernel, padding } => {
                    let weight = container
                        .get(&format!("layer{i}.weight"), Stage::Losses)?
                        .to_tensor(device, Stage::Losses)?;
                    let bias = container
                        .get(&format!("layer{i}.bias"), Stage::Losses)?
                        .to_tensor(device, Stage::Losses)?;
                    let dims = weight.dims4().map_err(Error::tensor(Stage::Losses))?;
                    if dims != (*out_channels, *in_channels, *kernel, *kernel) {
                        return Err(Error::state(
                            Stage::Losses,
                            format!("layer{i} weights {dims:?} do not match the declared spec"),
                        ));
                    }
                    StyleLayer::Conv { weight, bias, padding: *padding }
                }
                StyleLayerSpec::Relu => StyleLayer::Relu,
                StyleLayerSpec::MaxPool => StyleLayer::MaxPool,
            });
        }
        StyleExtractor::new(layers, taps, mean, std)
    }

    /// Tap-point feature maps for a unit-range NCHW batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4().map_err(Error::tensor(Stage::Losses))?;
        if c != self.input_channels() {
            return Err(Error::dimension(
                Stage::Losses,
                format!("extractor expects {} channels, got {c}", self.input_channels()),
            ));
        }
        let inner = || -> candle_core::Result<Vec<Tensor>> {
            let dtype = x.dtype();
            let device = x.device();
            let shape = (1, self.mean.len(), 1, 1);
            let mean = Tensor::from_vec(self.mean.clone(), shape, device)?.to_dtype(dtype)?;
            let std = Tensor::from_vec(self.std.clone(), shape, device)?.to_dtype(dtype)?;
            let mut cur = x.broadcast_sub(&mean)?.broadcast_div(&std)?;

            let mut feats = Vec::with_capacity(self.taps.len());
            for (i, layer) in self.layers.iter().enumerate() {
                cur = match layer {
                    StyleLayer::Conv { weight, bias, padding } => {
                        let w = weight.to_dtype(dtype)?;
                        let b = bias.to_dtype(dtype)?;
                        let out = cur.conv2d(&w, *padding, 1, 1, 1)?;
                        let (_, co, _, _) = out.dims4()?;
                        out.broadcast_add(&b.reshape((1, co, 1, 1))?)?
                    }
                    StyleLayer::Relu => cur.relu()?,
                    StyleLayer::MaxPool => cur.max_pool2d(2)?,
                };
                if self.taps.contains(&i) {
                    feats.push(cur.clone());
                }
            }
            Ok(feats)
        };
        inner().map_err(Error::tensor(Stage::Losses))
    }
}

/// Gram matrix per sample: (N, C, C) from (N, C, H, W), normalized by C·H·W.
fn gram(feat: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = feat.dims4()?;
    let flat = feat.reshape((n, c, h * w))?;
    let gram = flat.matmul(&flat.transpose(1, 2)?)?;
    gram.affine(1.0 / (c * h * w) as f64, 0.0)
}

/// Mean over tap layers of the mean absolute Gram difference.
pub fn style_loss(a: &Tensor, b: &Tensor, extractor: &StyleExtractor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let inner = || -> candle_core::Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (xa, xb) in fa.iter().zip(&fb) {
            let diff = (gram(xa)? - gram(xb)?)?.abs()?.mean_all()?;
            total = Some(match total.take() {
                None => diff,
                Some(acc) => (acc + diff)?,
            });
        }
        total
            .expect("extractor guarantees at least one tap")
            .affine(1.0 / fa.len() as f64, 0.0)
    };
    inner().map_err(Error::tensor(Stage::Losses))
}
