//! Adversarial training loop: per-batch D-then-G updates on corrupted
//! restoration pairs, exponential learning-rate decay, early stopping on
//! validation restoration loss, and epoch-granular checkpoint resume.
//!
//! Every random stream (shuffling, augmentation, mask draws, dropout) is
//! derived from the run seed plus structural indices, never from wall time
//! or worker identity, so a run replays exactly and a resumed run follows
//! the same trajectory as an uninterrupted one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{augment, load_patch, normalize, DatasetManifest};
use crate::detector::Restorer;
use crate::error::{Error, Result, Stage};
use crate::image::ImagePatch;
use crate::losses::{
    adversarial_losses, scalar_f64, total_generator_loss, LossBreakdown, LossWeights,
    StyleExtractor,
};
use crate::maskgen::{build_mask_pool, corrupt, sample_mask, MaskMode, MaskPool};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointState, Discriminator, DiscriminatorSpec,
    Generator, GeneratorSpec, Mode,
};
use crate::rng::{derive_seed, rng_for};

const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters. Defaults give the full-scale regime; desk
/// runs shrink `base_width`, `epochs` and the mask scales.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Per-epoch multiplicative decay applied to both learning rates.
    pub lr_decay_gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub mask_scales: Vec<usize>,
    pub mask_mode: MaskMode,
    /// Width multiplier shared by generator and discriminator.
    pub base_width: usize,
    /// Skip discriminator updates entirely (pure-restoration ablation);
    /// requires `lambda_adv == 0`.
    pub freeze_d: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            patience: 20,
            batch_size: 8,
            lr_g: 1e-4,
            lr_d: 4e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lr_decay_gamma: 0.97,
            weights: LossWeights::default(),
            seed: 0,
            mask_scales: vec![128, 64, 32],
            mask_mode: MaskMode::MultiscaleSquare,
            base_width: 64,
            freeze_d: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.base_width == 0 {
            return Err(Error::config("epochs, batch_size and base_width must be positive"));
        }
        if self.patience >= self.epochs {
            return Err(Error::config(format!(
                "patience ({}) must be smaller than epochs ({})",
                self.patience, self.epochs
            )));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::config(format!("{name} must be finite and positive, got {lr}")));
            }
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) || beta == 0.0 {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {beta}")));
            }
        }
        if !self.lr_decay_gamma.is_finite()
            || self.lr_decay_gamma <= 0.0
            || self.lr_decay_gamma > 1.0
        {
            return Err(Error::config(format!(
                "lr_decay_gamma must lie in (0, 1], got {}",
                self.lr_decay_gamma
            )));
        }
        self.weights.validate()?;
        if self.mask_scales.is_empty() {
            return Err(Error::config("at least one mask scale is required"));
        }
        if self.freeze_d && self.weights.lambda_adv > 0.0 {
            return Err(Error::config(
                "freeze_d holds the discriminator at initialization; adversarial feedback from \
                 it is noise, so lambda_adv must be 0",
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based): lr0 * gamma^(e-1).
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        lr0 * self.lr_decay_gamma.powi(epoch as i32 - 1)
    }
}

/// Hand-rolled Adam keyed by parameter name, so moments survive checkpoint
/// round trips without relying on parameter identity.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update over the named parameters, using bias correction at
    /// global step `t` (1-based). Parameters without a gradient are left
    /// untouched, as are their moments.
    pub fn step(&mut self, t: u64, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        if t == 0 {
            return Err(Error::argument(Stage::Trainer, "Adam step count is 1-based"));
        }
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else { continue };
            let step = || -> candle_core::Result<(Tensor, Tensor, Tensor)> {
                let m = match self.m.get(name) {
                    Some(prev) => (prev.affine(self.beta1, 0.0)?
                        + grad.affine(1.0 - self.beta1, 0.0)?)?,
                    None => grad.affine(1.0 - self.beta1, 0.0)?,
                };
                let v = match self.v.get(name) {
                    Some(prev) => (prev.affine(self.beta2, 0.0)?
                        + grad.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                    None => grad.sqr()?.affine(1.0 - self.beta2, 0.0)?,
                };
                let m_hat = m.affine(1.0 / c1, 0.0)?;
                let v_hat = v.affine(1.0 / c2, 0.0)?;
                let delta = m_hat.affine(self.lr, 0.0)?.div(&(v_hat.sqrt()? + ADAM_EPS)?)?;
                let updated = var.as_tensor().sub(&delta)?;
                Ok((updated, m, v))
            };
            let (updated, m, v) = step().map_err(Error::tensor(Stage::Trainer))?;
            var.set(&updated).map_err(Error::tensor(Stage::Trainer))?;
            // Detach before storing: a moment built from graph ops would keep
            // the gradient, and with it the whole step's graph, reachable
            // across steps, growing memory without bound.
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moments as checkpoint tensors: `<prefix><param>.m` / `.v`.
    pub fn export_moments(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (name, t) in &self.m {
            out.insert(format!("{prefix}{name}.m"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}{name}.v"), t.clone());
        }
    }

    pub fn import_moments(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) {
        for (key, tensor) in map {
            let Some(rest) = key.strip_prefix(prefix) else { continue };
            if let Some(name) = rest.strip_suffix(".m") {
                self.m.insert(name.to_string(), tensor.clone());
            } else if let Some(name) = rest.strip_suffix(".v") {
                self.v.insert(name.to_string(), tensor.clone());
            }
        }
    }
}

/// One full optimization step on a batch: a discriminator update on
/// detached fakes, then a generator update against the refreshed
/// discriminator. `corrupted` and `original` are signed-range (N,C,H,W).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    generator: &Generator,
    discriminator: &Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    corrupted: &Tensor,
    original: &Tensor,
    weights: &LossWeights,
    extractor: Option<&StyleExtractor>,
    freeze_d: bool,
    t: u64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let backend = Error::tensor(Stage::Trainer);
    let restored = generator.forward(corrupted, Mode::Train, Some(dropout_rng))?;

    let mut adv_d = 0.0;
    if !freeze_d {
        let fake = restored.detach();
        let real_logits = discriminator.forward(corrupted, original, Mode::Train)?;
        let fake_logits = discriminator.forward(corrupted, &fake, Mode::Train)?;
        let (_, d_loss) = adversarial_losses(&real_logits, &fake_logits)?;
        adv_d = scalar_f64(&d_loss)?;
        if !adv_d.is_finite() {
            return Err(Error::numeric(Stage::Trainer, "adversarial_d", format!(" (value {adv_d})")));
        }
        let grads = d_loss.backward().map_err(backend)?;
        opt_d.step(t, &discriminator.named_vars(), &grads)?;
    }

    let fake_logits = if weights.lambda_adv > 0.0 {
        Some(discriminator.forward(corrupted, &restored, Mode::Train)?)
    } else {
        None
    };
    let backend = Error::tensor(Stage::Trainer);
    let restored_unit = restored.affine(0.5, 0.5).map_err(backend)?;
    let backend = Error::tensor(Stage::Trainer);
    let original_unit = original.affine(0.5, 0.5).map_err(backend)?;
    let (total, mut breakdown) =
        total_generator_loss(&restored_unit, &original_unit, fake_logits.as_ref(), weights, extractor)?;
    let grads = total.backward().map_err(Error::tensor(Stage::Trainer))?;
    opt_g.step(t, &generator.named_vars(), &grads)?;

    breakdown.adversarial_d = adv_d;
    Ok(breakdown)
}

/// Mean validation restoration loss under fixed per-sample masks.
///
/// The adversarial term is excluded: it is non-stationary while D trains,
/// which would make early stopping depend on the discriminator schedule.
pub fn validate(
    model: &dyn Restorer,
    val_patches: &[ImagePatch],
    pool: &MaskPool,
    weights: &LossWeights,
    extractor: Option<&StyleExtractor>,
    seed: u64,
) -> Result<f64> {
    if val_patches.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let device = model.device().clone();
    let res_weights = LossWeights { lambda_adv: 0.0, ..*weights };
    let mut sum = 0.0;
    for (i, patch) in val_patches.iter().enumerate() {
        let (normalized, _) = normalize(patch)?;
        // Masks keyed by sample index only: identical across epochs so the
        // early-stop signal compares like with like.
        let mask = sample_mask(pool, derive_seed(seed, "val_mask", &[i as u64]))?;
        let corrupted = corrupt(&normalized, mask)?;
        let backend = Error::tensor(Stage::Trainer);
        let x = corrupted.to_tensor(&device)?.unsqueeze(0).map_err(backend)?;
        let backend = Error::tensor(Stage::Trainer);
        let y = normalized.to_tensor(&device)?.unsqueeze(0).map_err(backend)?;
        let restored = model.restore_batch(&x)?;
        let backend = Error::tensor(Stage::Trainer);
        let restored_unit = restored.affine(0.5, 0.5).map_err(backend)?;
        let backend = Error::tensor(Stage::Trainer);
        let y_unit = y.affine(0.5, 0.5).map_err(backend)?;
        let (_, breakdown) =
            total_generator_loss(&restored_unit, &y_unit, None, &res_weights, extractor)?;
        sum += breakdown.restoration;
    }
    Ok(sum / val_patches.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_res: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub rows: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub history: TrainHistory,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

const HISTORY_HEADER: &str =
    "epoch,mae,ssim,msgms,style,adv_g,adv_d,res,total,val_res,lr_g,lr_d,seconds";

fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.train;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            t.mae,
            t.ssim,
            t.msgms,
            t.style,
            t.adversarial_g,
            t.adversarial_d,
            t.restoration,
            t.total,
            r.val_res,
            r.lr_g,
            r.lr_d,
            r.seconds
        )
        .expect("writing to a String cannot fail");
    }
    std::fs::write(path, out).map_err(Error::io(Stage::Trainer, path))
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(Stage::Trainer, path))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::state(
                Stage::Trainer,
                format!("{}:{}: malformed history row", path.display(), lineno + 1),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::state(
                    Stage::Trainer,
                    format!("{}:{}: bad number '{}'", path.display(), lineno + 1, fields[i]),
                )
            })
        };
        rows.push(EpochRecord {
            epoch: num(0)? as usize,
            train: LossBreakdown {
                mae: num(1)?,
                ssim: num(2)?,
                msgms: num(3)?,
                style: num(4)?,
                adversarial_g: num(5)?,
                adversarial_d: num(6)?,
                restoration: num(7)?,
                total: num(8)?,
            },
            val_res: num(9)?,
            lr_g: num(10)?,
            lr_d: num(11)?,
            seconds: num(12)?,
        });
    }
    Ok(rows)
}

/// Early-stopping oracle over a validation-loss sequence (1-based epochs):
/// returns (best_epoch, stop_epoch). Improvement must be strict.
pub fn early_stop_scan(vals: &[f64], patience: usize) -> (usize, usize) {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    for (i, &v) in vals.iter().enumerate() {
        let epoch = i + 1;
        if v < best {
            best = v;
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
        }
        if since >= patience {
            return (best_epoch, epoch);
        }
    }
    (best_epoch, vals.len())
}

fn abort_with_checkpoint(err: Error, last: &Path) -> Error {
    if last.exists() {
        Error::state(
            Stage::Trainer,
            format!("{err}; aborting, last good checkpoint: {}", last.display()),
        )
    } else {
        Error::state(Stage::Trainer, format!("{err}; aborting before any checkpoint was written"))
    }
}

fn stack_batch(patches: &[ImagePatch], device: &Device) -> Result<Tensor> {
    let (c, h, w) = (patches[0].channels(), patches[0].height(), patches[0].width());
    let mut data = Vec::with_capacity(patches.len() * c * h * w);
    for p in patches {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(data, (patches.len(), c, h, w), device)
        .map_err(Error::tensor(Stage::Trainer))
}

fn load_split(manifest: &DatasetManifest) -> Result<Vec<ImagePatch>> {
    manifest.entries.iter().map(|e| load_patch(&e.image, manifest.resolution)).collect()
}

struct RunState {
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    state: CheckpointState,
    rows: Vec<EpochRecord>,
}

fn save_run_checkpoint(path: &Path, run: &RunState) -> Result<()> {
    let mut opt = BTreeMap::new();
    run.opt_g.export_moments("g.", &mut opt);
    run.opt_d.export_moments("d.", &mut opt);
    save_checkpoint(path, &run.state, &run.generator, &run.discriminator, &opt)
}

/// Train to convergence (or the epoch budget) under `config`, writing
/// `best.ckpt`, `last.ckpt` and `history.csv` into `run_dir`. An existing
/// `last.ckpt` resumes the run at the next epoch; history rows beyond the
/// checkpointed epoch are discarded so a mid-epoch crash cannot leave a
/// phantom row.
pub fn fit(
    run_dir: &Path,
    config: &TrainConfig,
    train: &DatasetManifest,
    val: &DatasetManifest,
    extractor: Option<&StyleExtractor>,
) -> Result<FitOutcome> {
    config.validate()?;
    if config.weights.lambda_style > 0.0 && extractor.is_none() {
        return Err(Error::config(
            "lambda_style > 0 requires a style extractor; load one or disable the style term",
        ));
    }
    if train.resolution != val.resolution {
        return Err(Error::config(format!(
            "train resolution {} != val resolution {}",
            train.resolution, val.resolution
        )));
    }
    let resolution = train.resolution;
    std::fs::create_dir_all(run_dir).map_err(Error::io(Stage::Trainer, run_dir))?;
    let best_path = run_dir.join("best.ckpt");
    let last_path = run_dir.join("last.ckpt");
    let history_path = run_dir.join("history.csv");

    let device = Device::Cpu;
    let gen_spec = GeneratorSpec::for_resolution(resolution, config.base_width)?;
    let disc_spec = DiscriminatorSpec {
        base_width: config.base_width,
        ..DiscriminatorSpec::default()
    };
    let pool = build_mask_pool(
        resolution,
        resolution,
        &config.mask_scales,
        config.mask_mode,
        config.seed,
    )?;

    let train_patches = load_split(train)?;
    if train_patches.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let val_patches = load_split(val)?;
    if val_patches.is_empty() {
        return Err(Error::config("validation set is empty"));
    }

    let mut run = if last_path.exists() {
        let loaded = load_checkpoint(&last_path, &device)?;
        if loaded.generator.spec() != &gen_spec || loaded.discriminator.spec() != &disc_spec {
            return Err(Error::config(format!(
                "checkpoint {} was trained with a different architecture",
                last_path.display()
            )));
        }
        if loaded.state.seed != config.seed {
            return Err(Error::config(format!(
                "checkpoint seed {} != configured seed {}; refusing to resume a diverging run",
                loaded.state.seed, config.seed
            )));
        }
        let mut opt_g = Adam::new(config.lr_g, config.adam_beta1, config.adam_beta2);
        let mut opt_d = Adam::new(config.lr_d, config.adam_beta1, config.adam_beta2);
        opt_g.import_moments("g.", &loaded.opt);
        opt_d.import_moments("d.", &loaded.opt);
        // Drop any history rows past the checkpointed epoch.
        let mut rows = read_history(&history_path).unwrap_or_default();
        rows.retain(|r| r.epoch <= loaded.state.epoch);
        write_history(&history_path, &rows)?;
        RunState {
            generator: loaded.generator,
            discriminator: loaded.discriminator,
            opt_g,
            opt_d,
            state: loaded.state,
            rows,
        }
    } else {
        RunState {
            generator: Generator::new(gen_spec.clone(), config.seed, &device)?,
            discriminator: Discriminator::new(disc_spec.clone(), config.seed, &device)?,
            opt_g: Adam::new(config.lr_g, config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(config.lr_d, config.adam_beta1, config.adam_beta2),
            state: CheckpointState {
                epoch: 0,
                best_epoch: 0,
                best_val: None,
                epochs_since_best: 0,
                seed: config.seed,
                adam_step: 0,
            },
            rows: Vec::new(),
        }
    };

    // Patience only counts completed epochs: a fresh run (epoch 0) must
    // always train, even with patience 0; a resumed run whose patience was
    // already exhausted must not.
    let exhausted = |state: &CheckpointState| {
        state.epoch > 0 && state.epochs_since_best >= config.patience
    };
    let mut stopped_early = exhausted(&run.state);
    let start = run.state.epoch + 1;
    for epoch in start..=config.epochs {
        if exhausted(&run.state) {
            break;
        }
        let clock = Instant::now();
        let lr_g = config.lr_at(config.lr_g, epoch);
        let lr_d = config.lr_at(config.lr_d, epoch);
        run.opt_g.set_lr(lr_g);
        run.opt_d.set_lr(lr_d);

        let mut order: Vec<usize> = (0..train_patches.len()).collect();
        order.shuffle(&mut rng_for(config.seed, "epoch_shuffle", &[epoch as u64]));

        let mut breakdowns = Vec::new();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut corrupted = Vec::with_capacity(chunk.len());
            let mut originals = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let aug = augment(
                    &train_patches[idx],
                    derive_seed(config.seed, "augment", &[epoch as u64, idx as u64]),
                );
                let (normalized, _) = normalize(&aug)?;
                let mask = sample_mask(
                    &pool,
                    derive_seed(config.seed, "train_mask", &[epoch as u64, idx as u64]),
                )?;
                corrupted.push(corrupt(&normalized, mask)?);
                originals.push(normalized);
            }
            let x = stack_batch(&corrupted, &device)?;
            let y = stack_batch(&originals, &device)?;
            run.state.adam_step += 1;
            let mut dropout_rng =
                rng_for(config.seed, "dropout", &[epoch as u64, step as u64]);
            let breakdown = train_step(
                &run.generator,
                &run.discriminator,
                &mut run.opt_g,
                &mut run.opt_d,
                &x,
                &y,
                &config.weights,
                extractor,
                config.freeze_d,
                run.state.adam_step,
                &mut dropout_rng,
            )
            .map_err(|e| abort_with_checkpoint(e, &last_path))?;
            breakdowns.push(breakdown);
        }

        let val_res = validate(
            &run.generator,
            &val_patches,
            &pool,
            &config.weights,
            extractor,
            config.seed,
        )
        .map_err(|e| abort_with_checkpoint(e, &last_path))?;
        if !val_res.is_finite() {
            return Err(abort_with_checkpoint(
                Error::numeric(Stage::Trainer, "val_res", format!(" (value {val_res})")),
                &last_path,
            ));
        }

        run.rows.push(EpochRecord {
            epoch,
            train: LossBreakdown::mean(&breakdowns),
            val_res,
            lr_g,
            lr_d,
            seconds: clock.elapsed().as_secs_f64(),
        });
        write_history(&history_path, &run.rows)?;

        let improved = run.state.best_val.is_none_or(|best| val_res < best);
        run.state.epoch = epoch;
        if improved {
            run.state.best_val = Some(val_res);
            run.state.best_epoch = epoch;
            run.state.epochs_since_best = 0;
        } else {
            run.state.epochs_since_best += 1;
        }
        if improved {
            save_run_checkpoint(&best_path, &run)?;
        }
        save_run_checkpoint(&last_path, &run)?;

        if exhausted(&run.state) {
            stopped_early = true;
            break;
        }
    }

    let best_val = run.state.best_val.ok_or_else(|| {
        Error::state(Stage::Trainer, "no epoch completed; nothing was trained")
    })?;
    Ok(FitOutcome {
        history: TrainHistory { rows: run.rows, best_epoch: run.state.best_epoch },
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch: run.state.best_epoch,
        best_val,
        stopped_early,
    })
}
