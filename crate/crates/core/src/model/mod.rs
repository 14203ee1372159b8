//! Restoration generator (U-Net) and conditional patch discriminator.
//!
//! The generator follows the Pix2Pix U-Net: stride-2 4x4 convolutions down,
//! mirrored transposed convolutions up, skip concatenations between levels
//! of equal resolution, widths doubling from `base_width` and capped at
//! 8x. The discriminator is the 70-pixel-receptive-field patch classifier
//! scoring (condition, candidate) channel concatenations.
//!
//! One deliberate deviation from the original implementation: convolutions
//! carry a bias exactly when no batch norm follows them (the original gives
//! every encoder conv a bias-free kernel even where normalization is
//! absent).

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint, CheckpointState};
pub use layers::{dropout, leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d};

use candle_core::{Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Restorer;
use crate::error::{Error, Result, Stage};
use crate::rng::rng_for;

/// Train enables batch statistics and dropout; eval is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// U-Net shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    /// Downsampling steps; a 2^depth-divisible input reaches a
    /// (h/2^depth) bottleneck.
    pub depth: usize,
    pub dropout_rate: f64,
    /// How many decoder blocks, counted from the bottleneck, apply dropout.
    pub dropout_blocks: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            input_channels: 3,
            output_channels: 3,
            base_width: 64,
            depth: 8,
            dropout_rate: 0.5,
            dropout_blocks: 3,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorSpec {
    /// Spec whose bottleneck is 1x1 for square power-of-two inputs.
    pub fn for_resolution(resolution: usize, base_width: usize) -> Result<Self> {
        if resolution < 2 || !resolution.is_power_of_two() {
            return Err(Error::argument(
                Stage::Model,
                format!("resolution {resolution} is not a power of two >= 2"),
            ));
        }
        Ok(GeneratorSpec {
            base_width,
            depth: resolution.trailing_zeros() as usize,
            ..GeneratorSpec::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 || self.base_width == 0 {
            return Err(Error::argument(Stage::Model, "channel and width counts must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::argument(Stage::Model, "generator depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::argument(
                Stage::Model,
                format!("dropout rate {} outside [0,1)", self.dropout_rate),
            ));
        }
        if self.leaky_slope < 0.0 {
            return Err(Error::argument(Stage::Model, "leaky slope must be nonnegative"));
        }
        Ok(())
    }

    /// Encoder width at level `i`: base doubled per level, capped at 8x.
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i.min(3)
    }
}

/// Patch discriminator shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Condition channels + candidate channels.
    pub input_channels: usize,
    pub base_width: usize,
    /// Stride-2 blocks before the two stride-1 head blocks.
    pub stride2_blocks: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            input_channels: 6,
            base_width: 64,
            stride2_blocks: 3,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 || self.stride2_blocks == 0 {
            return Err(Error::argument(
                Stage::Model,
                "discriminator channels, width and block count must be positive",
            ));
        }
        Ok(())
    }
}

struct EncBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

struct DecBlock {
    tconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
    dropout: bool,
}

/// The decoder block consuming each encoder feature 0..depth-2; feature
/// depth-1 is the bottleneck input. The map must be a bijection, which is
/// what makes "each skip has exactly one consumer" an invariant rather
/// than a hope.
fn skip_consumers(depth: usize) -> Vec<usize> {
    (0..depth.saturating_sub(1)).map(|feature| depth - 2 - feature).collect()
}

/// U-Net restoration generator.
pub struct Generator {
    spec: GeneratorSpec,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    device: Device,
}

impl Generator {
    /// Build with Gaussian(0, 0.02) weights drawn from a stream derived
    /// from `seed`; the same seed always yields the same parameters.
    pub fn new(spec: GeneratorSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let d = spec.depth;
        let mut rng = rng_for(seed, "generator_init", &[]);

        let mut enc = Vec::with_capacity(d);
        for i in 0..d {
            let in_c = if i == 0 { spec.input_channels } else { spec.width(i - 1) };
            let out_c = spec.width(i);
            // No norm on the first block (raw input statistics) nor on the
            // bottleneck (often a singleton spatial map).
            let with_bn = i > 0 && i < d - 1;
            let conv = Conv2d::new(in_c, out_c, 4, 2, 1, !with_bn, &mut rng, device)?;
            let bn = if with_bn { Some(BatchNorm2d::new(out_c, device)?) } else { None };
            enc.push(EncBlock { conv, bn });
        }

        let mut dec = Vec::with_capacity(d);
        for j in 0..d {
            let in_c = if j == 0 { spec.width(d - 1) } else { 2 * spec.width(d - 1 - j) };
            let last = j == d - 1;
            let out_c = if last { spec.output_channels } else { spec.width(d - 2 - j) };
            let with_bn = !last;
            let tconv = ConvTranspose2d::new(in_c, out_c, 4, 2, 1, !with_bn, &mut rng, device)?;
            let bn = if with_bn { Some(BatchNorm2d::new(out_c, device)?) } else { None };
            dec.push(DecBlock { tconv, bn, dropout: !last && j < spec.dropout_blocks });
        }

        // Architectural check: every non-bottleneck encoder feature feeds
        // exactly one decoder block.
        let consumers = skip_consumers(d);
        let mut seen = vec![false; d.saturating_sub(1)];
        for &c in &consumers {
            if c >= seen.len() || seen[c] {
                return Err(Error::state(Stage::Model, "skip connections are not a bijection"));
            }
            seen[c] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::state(Stage::Model, "unconsumed encoder feature"));
        }

        Ok(Generator { spec, enc, dec, device: device.clone() })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Signed-range restoration of a signed-range (N,C,H,W) batch.
    ///
    /// Train mode draws dropout masks from `rng`, which is then required;
    /// eval mode never touches it.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(Error::tensor(Stage::Model))?;
        if c != self.spec.input_channels {
            return Err(Error::dimension(
                Stage::Model,
                format!("generator expects {} input channels, got {c}", self.spec.input_channels),
            ));
        }
        let stride_total = 1usize << self.spec.depth;
        if h % stride_total != 0 || w % stride_total != 0 {
            return Err(Error::dimension(
                Stage::Model,
                format!("spatial size {h}x{w} is not divisible by 2^depth = {stride_total}"),
            ));
        }
        let train = mode == Mode::Train;
        let needs_rng = train && self.spec.dropout_rate > 0.0;
        if needs_rng && rng.is_none() {
            return Err(Error::argument(
                Stage::Model,
                "train-mode forward with dropout needs an rng stream",
            ));
        }

        let d = self.spec.depth;
        let mut feats: Vec<Tensor> = Vec::with_capacity(d);
        let mut cur = x.clone();
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                cur = leaky_relu(&cur, self.spec.leaky_slope)?;
            }
            cur = block.conv.forward(&cur)?;
            if let Some(bn) = &block.bn {
                cur = bn.forward(&cur, train)?;
            }
            feats.push(cur.clone());
        }

        for (j, block) in self.dec.iter().enumerate() {
            cur = cur.relu().map_err(Error::tensor(Stage::Model))?;
            cur = block.tconv.forward(&cur)?;
            if let Some(bn) = &block.bn {
                cur = bn.forward(&cur, train)?;
            }
            if j == d - 1 {
                cur = cur.tanh().map_err(Error::tensor(Stage::Model))?;
            } else {
                if block.dropout && needs_rng {
                    let stream = rng.as_deref_mut().expect("checked above");
                    cur = dropout(&cur, self.spec.dropout_rate, stream)?;
                }
                // Skip connection: encoder feature first, matching the
                // reference implementation's concatenation order.
                cur = Tensor::cat(&[&feats[d - 2 - j], &cur], 1)
                    .map_err(Error::tensor(Stage::Model))?;
            }
        }
        Ok(cur)
    }

    /// Trainable parameters with stable hierarchical names.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            for (leaf, var) in block.conv.vars() {
                out.push((format!("enc{i}.conv.{leaf}"), var.clone()));
            }
            if let Some(bn) = &block.bn {
                for (leaf, var) in bn.vars() {
                    out.push((format!("enc{i}.bn.{leaf}"), var.clone()));
                }
            }
        }
        for (j, block) in self.dec.iter().enumerate() {
            for (leaf, var) in block.tconv.vars() {
                out.push((format!("dec{j}.tconv.{leaf}"), var.clone()));
            }
            if let Some(bn) = &block.bn {
                for (leaf, var) in bn.vars() {
                    out.push((format!("dec{j}.bn.{leaf}"), var.clone()));
                }
            }
        }
        out
    }

    /// Batch-norm running statistics with stable names.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            if let Some(bn) = &block.bn {
                for (leaf, t) in bn.buffers() {
                    out.push((format!("enc{i}.bn.{leaf}"), t));
                }
            }
        }
        for (j, block) in self.dec.iter().enumerate() {
            if let Some(bn) = &block.bn {
                for (leaf, t) in bn.buffers() {
                    out.push((format!("dec{j}.bn.{leaf}"), t));
                }
            }
        }
        out
    }

    /// Replace one running-statistic buffer addressed by its full name.
    pub fn set_named_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let bad_name = || Error::argument(Stage::Model, format!("unknown buffer '{name}'"));
        let (block_part, rest) = name.split_once('.').ok_or_else(bad_name)?;
        let (kind, leaf) = rest.split_once('.').ok_or_else(bad_name)?;
        if kind != "bn" {
            return Err(bad_name());
        }
        let bn = if let Some(i) = block_part.strip_prefix("enc") {
            let i: usize = i.parse().map_err(|_| bad_name())?;
            self.enc.get(i).and_then(|b| b.bn.as_ref())
        } else if let Some(j) = block_part.strip_prefix("dec") {
            let j: usize = j.parse().map_err(|_| bad_name())?;
            self.dec.get(j).and_then(|b| b.bn.as_ref())
        } else {
            None
        };
        bn.ok_or_else(bad_name)?.set_buffer(leaf, value)
    }

    pub fn param_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }
}

impl Restorer for Generator {
    fn restore_batch(&self, corrupted: &Tensor) -> Result<Tensor> {
        self.forward(corrupted, Mode::Eval, None)
    }

    fn input_channels(&self) -> usize {
        self.spec.input_channels
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

struct DiscBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    /// Raw logits on the last block, leaky ReLU elsewhere.
    activate: bool,
}

/// Conditional patch discriminator producing a logit map.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    blocks: Vec<DiscBlock>,
    device: Device,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, "discriminator_init", &[]);
        let mut blocks = Vec::new();
        let mut in_c = spec.input_channels;
        // Stride-2 pyramid, widths doubling from base.
        for i in 0..spec.stride2_blocks {
            let out_c = spec.base_width << i.min(3);
            let with_bn = i > 0;
            let conv = Conv2d::new(in_c, out_c, 4, 2, 1, !with_bn, &mut rng, device)?;
            let bn = if with_bn { Some(BatchNorm2d::new(out_c, device)?) } else { None };
            blocks.push(DiscBlock { conv, bn, activate: true });
            in_c = out_c;
        }
        // Stride-1 head: one widening block, then the 1-channel logit map.
        let head_c = spec.base_width << spec.stride2_blocks.min(3);
        let conv = Conv2d::new(in_c, head_c, 4, 1, 1, false, &mut rng, device)?;
        blocks.push(DiscBlock { conv, bn: Some(BatchNorm2d::new(head_c, device)?), activate: true });
        let logit = Conv2d::new(head_c, 1, 4, 1, 1, true, &mut rng, device)?;
        blocks.push(DiscBlock { conv: logit, bn: None, activate: false });

        Ok(Discriminator { spec, blocks, device: device.clone() })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Logit map for a (condition, candidate) pair of (N,C,H,W) batches.
    pub fn forward(&self, condition: &Tensor, candidate: &Tensor, mode: Mode) -> Result<Tensor> {
        let backend = Error::tensor(Stage::Model);
        let (n1, c1, h1, w1) = condition.dims4().map_err(backend)?;
        let backend = Error::tensor(Stage::Model);
        let (n2, c2, h2, w2) = candidate.dims4().map_err(backend)?;
        if (n1, h1, w1) != (n2, h2, w2) {
            return Err(Error::dimension(
                Stage::Model,
                "condition and candidate batches must share N, H, W",
            ));
        }
        if c1 + c2 != self.spec.input_channels {
            return Err(Error::dimension(
                Stage::Model,
                format!(
                    "condition ({c1}) + candidate ({c2}) channels must equal {}",
                    self.spec.input_channels
                ),
            ));
        }
        // Every block must produce at least one output pixel: k4 p1 gives
        // out = (n - 2) / stride + 1, needing n >= 3.
        let mut size = h1.min(w1);
        for i in 0..self.blocks.len() {
            if size < 3 {
                return Err(Error::dimension(
                    Stage::Model,
                    format!("input {h1}x{w1} is too small for the discriminator stack"),
                ));
            }
            let stride = if i < self.spec.stride2_blocks { 2 } else { 1 };
            size = (size - 2) / stride + 1;
        }
        let mut cur =
            Tensor::cat(&[condition, candidate], 1).map_err(Error::tensor(Stage::Model))?;
        let train = mode == Mode::Train;
        for block in &self.blocks {
            cur = block.conv.forward(&cur)?;
            if let Some(bn) = &block.bn {
                cur = bn.forward(&cur, train)?;
            }
            if block.activate {
                cur = leaky_relu(&cur, self.spec.leaky_slope)?;
            }
        }
        Ok(cur)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (leaf, var) in block.conv.vars() {
                out.push((format!("block{i}.conv.{leaf}"), var.clone()));
            }
            if let Some(bn) = &block.bn {
                for (leaf, var) in bn.vars() {
                    out.push((format!("block{i}.bn.{leaf}"), var.clone()));
                }
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(bn) = &block.bn {
                for (leaf, t) in bn.buffers() {
                    out.push((format!("block{i}.bn.{leaf}"), t));
                }
            }
        }
        out
    }

    pub fn set_named_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let bad_name = || Error::argument(Stage::Model, format!("unknown buffer '{name}'"));
        let (block_part, rest) = name.split_once('.').ok_or_else(bad_name)?;
        let (kind, leaf) = rest.split_once('.').ok_or_else(bad_name)?;
        if kind != "bn" {
            return Err(bad_name());
        }
        let i: usize =
            block_part.strip_prefix("block").ok_or_else(bad_name)?.parse().map_err(|_| bad_name())?;
        let bn = self.blocks.get(i).and_then(|b| b.bn.as_ref()).ok_or_else(bad_name)?;
        bn.set_buffer(leaf, value)
    }

    pub fn param_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }
}
