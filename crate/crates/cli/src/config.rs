//! Run configuration: defaults, config-file parsing and flag overrides.
//!
//! Precedence is flag > file > default, tracked per key so the resolved
//! snapshot records where every value came from. The file format is flat
//! `key = value` text; `#` starts a comment anywhere on a line. The same
//! parser reads back the `config.resolved` snapshot a run writes, which is
//! what makes a finished run directory sufficient to reproduce the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crackdet_core::detector::{DetectParams, RestoreStrategy};
use crackdet_core::losses::LossWeights;
use crackdet_core::maskgen::MaskMode;
use crackdet_core::trainer::TrainConfig;
use crackdet_core::{Error, Result};

use crate::Overrides;

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

/// Which grid the ablate subcommand sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Losses,
    Masks,
}

impl fmt::Display for AblateAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblateAxis::Losses => "losses",
            AblateAxis::Masks => "masks",
        })
    }
}

impl FromStr for AblateAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(AblateAxis::Losses),
            "masks" => Ok(AblateAxis::Masks),
            other => Err(Error::config(format!(
                "unknown ablation axis '{other}' (expected losses or masks)"
            ))),
        }
    }
}

/// Every tunable of every subcommand, merged into one flat namespace.
///
/// Path-valued options that default relative to the run directory
/// (`checkpoint`, `pred_dir`) stay `None` until set, so the derivation can
/// happen at the point of use.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // Paths.
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub style_weights: Option<PathBuf>,
    // Training.
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_decay_gamma: f64,
    pub lambda_mae: f64,
    pub lambda_ssim: f64,
    pub lambda_gms: f64,
    pub lambda_style: f64,
    pub lambda_res: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    pub mask_scales: Vec<usize>,
    pub mask_mode: MaskMode,
    pub base_width: usize,
    pub freeze_d: bool,
    pub no_style: bool,
    pub resolution: usize,
    // Detection.
    pub strategy: RestoreStrategy,
    pub bilateral_diameter: usize,
    pub sigma_intensity: f64,
    pub sigma_spatial: f64,
    pub write_error_maps: bool,
    pub write_overlays: bool,
    // Synthesis.
    pub n_train: usize,
    pub n_test: usize,
    // Ablation.
    pub ablate_axis: AblateAxis,

    provenance: BTreeMap<&'static str, Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        let w = LossWeights::default();
        let dp = DetectParams::default();
        RunConfig {
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            checkpoint: None,
            pred_dir: None,
            style_weights: None,
            epochs: tc.epochs,
            patience: tc.patience,
            batch_size: tc.batch_size,
            lr_g: tc.lr_g,
            lr_d: tc.lr_d,
            adam_beta1: tc.adam_beta1,
            adam_beta2: tc.adam_beta2,
            lr_decay_gamma: tc.lr_decay_gamma,
            lambda_mae: w.lambda_mae,
            lambda_ssim: w.lambda_ssim,
            lambda_gms: w.lambda_gms,
            lambda_style: w.lambda_style,
            lambda_res: w.lambda_res,
            lambda_adv: w.lambda_adv,
            seed: tc.seed,
            mask_scales: tc.mask_scales,
            mask_mode: tc.mask_mode,
            base_width: tc.base_width,
            freeze_d: tc.freeze_d,
            no_style: false,
            resolution: crackdet_core::datapipe::DEFAULT_RESOLUTION,
            strategy: dp.strategy,
            bilateral_diameter: dp.bilateral_diameter,
            sigma_intensity: dp.sigma_intensity,
            sigma_spatial: dp.sigma_spatial,
            write_error_maps: false,
            write_overlays: false,
            n_train: 100,
            n_test: 20,
            ablate_axis: AblateAxis::Losses,
            provenance: BTreeMap::new(),
        }
    }
}

/// Registry of accepted keys, in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "data_root",
    "run_dir",
    "checkpoint",
    "pred_dir",
    "style_weights",
    "epochs",
    "patience",
    "batch_size",
    "lr_g",
    "lr_d",
    "adam_beta1",
    "adam_beta2",
    "lr_decay_gamma",
    "lambda_mae",
    "lambda_ssim",
    "lambda_gms",
    "lambda_style",
    "lambda_res",
    "lambda_adv",
    "seed",
    "mask_scales",
    "mask_mode",
    "base_width",
    "freeze_d",
    "no_style",
    "resolution",
    "strategy",
    "bilateral_diameter",
    "sigma_intensity",
    "sigma_spatial",
    "write_error_maps",
    "write_overlays",
    "n_train",
    "n_test",
    "ablate_axis",
];

fn parse_num<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::config(format!("key '{key}': cannot parse '{raw}': {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "key '{key}': expected true or false, got '{other}'"
        ))),
    }
}

fn parse_scales(key: &str, raw: &str) -> Result<Vec<usize>> {
    let scales: Vec<usize> = raw
        .split(',')
        .map(|part| parse_num(key, part))
        .collect::<Result<_>>()?;
    if scales.is_empty() {
        return Err(Error::config(format!("key '{key}': scale list is empty")));
    }
    Ok(scales)
}

fn format_scales(scales: &[usize]) -> String {
    scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

/// Classic edit distance; small enough inputs that O(n*m) is irrelevant.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn unknown_key_error(key: &str) -> Error {
    let nearest = KEYS
        .iter()
        .map(|k| (edit_distance(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= 3);
    match nearest {
        Some((_, suggestion)) => {
            Error::config(format!("unknown key '{key}' (did you mean '{suggestion}'?)"))
        }
        None => Error::config(format!("unknown key '{key}'")),
    }
}

impl RunConfig {
    /// Parse and assign one key; records provenance on success.
    pub fn set_key(&mut self, key: &str, raw: &str, prov: Provenance) -> Result<()> {
        let canonical: &'static str = match key {
            "data_root" => {
                self.data_root = PathBuf::from(raw);
                "data_root"
            }
            "run_dir" => {
                self.run_dir = PathBuf::from(raw);
                "run_dir"
            }
            "checkpoint" => {
                self.checkpoint = Some(PathBuf::from(raw));
                "checkpoint"
            }
            "pred_dir" => {
                self.pred_dir = Some(PathBuf::from(raw));
                "pred_dir"
            }
            "style_weights" => {
                self.style_weights = Some(PathBuf::from(raw));
                "style_weights"
            }
            "epochs" => {
                self.epochs = parse_num(key, raw)?;
                "epochs"
            }
            "patience" => {
                self.patience = parse_num(key, raw)?;
                "patience"
            }
            "batch_size" => {
                self.batch_size = parse_num(key, raw)?;
                "batch_size"
            }
            "lr_g" => {
                self.lr_g = parse_num(key, raw)?;
                "lr_g"
            }
            "lr_d" => {
                self.lr_d = parse_num(key, raw)?;
                "lr_d"
            }
            "adam_beta1" => {
                self.adam_beta1 = parse_num(key, raw)?;
                "adam_beta1"
            }
            "adam_beta2" => {
                self.adam_beta2 = parse_num(key, raw)?;
                "adam_beta2"
            }
            "lr_decay_gamma" => {
                self.lr_decay_gamma = parse_num(key, raw)?;
                "lr_decay_gamma"
            }
            "lambda_mae" => {
                self.lambda_mae = parse_num(key, raw)?;
                "lambda_mae"
            }
            "lambda_ssim" => {
                self.lambda_ssim = parse_num(key, raw)?;
                "lambda_ssim"
            }
            "lambda_gms" => {
                self.lambda_gms = parse_num(key, raw)?;
                "lambda_gms"
            }
            "lambda_style" => {
                self.lambda_style = parse_num(key, raw)?;
                "lambda_style"
            }
            "lambda_res" => {
                self.lambda_res = parse_num(key, raw)?;
                "lambda_res"
            }
            "lambda_adv" => {
                self.lambda_adv = parse_num(key, raw)?;
                "lambda_adv"
            }
            "seed" => {
                self.seed = parse_num(key, raw)?;
                "seed"
            }
            "mask_scales" => {
                self.mask_scales = parse_scales(key, raw)?;
                "mask_scales"
            }
            "mask_mode" => {
                self.mask_mode = raw.trim().parse()?;
                "mask_mode"
            }
            "base_width" => {
                self.base_width = parse_num(key, raw)?;
                "base_width"
            }
            "freeze_d" => {
                self.freeze_d = parse_bool(key, raw)?;
                "freeze_d"
            }
            "no_style" => {
                self.no_style = parse_bool(key, raw)?;
                "no_style"
            }
            "resolution" => {
                self.resolution = parse_num(key, raw)?;
                "resolution"
            }
            "strategy" => {
                self.strategy = raw.trim().parse()?;
                "strategy"
            }
            "bilateral_diameter" => {
                self.bilateral_diameter = parse_num(key, raw)?;
                "bilateral_diameter"
            }
            "sigma_intensity" => {
                self.sigma_intensity = parse_num(key, raw)?;
                "sigma_intensity"
            }
            "sigma_spatial" => {
                self.sigma_spatial = parse_num(key, raw)?;
                "sigma_spatial"
            }
            "write_error_maps" => {
                self.write_error_maps = parse_bool(key, raw)?;
                "write_error_maps"
            }
            "write_overlays" => {
                self.write_overlays = parse_bool(key, raw)?;
                "write_overlays"
            }
            "n_train" => {
                self.n_train = parse_num(key, raw)?;
                "n_train"
            }
            "n_test" => {
                self.n_test = parse_num(key, raw)?;
                "n_test"
            }
            "ablate_axis" => {
                self.ablate_axis = raw.trim().parse()?;
                "ablate_axis"
            }
            other => return Err(unknown_key_error(other)),
        };
        self.provenance.insert(canonical, prov);
        Ok(())
    }

    pub fn provenance(&self, key: &str) -> Provenance {
        self.provenance.get(key).copied().unwrap_or(Provenance::Default)
    }

    /// Current value of a key rendered in the syntax `set_key` accepts, or
    /// `None` for unset optional paths.
    fn render(&self, key: &str) -> Option<String> {
        Some(match key {
            "data_root" => self.data_root.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "checkpoint" => self.checkpoint.as_ref()?.display().to_string(),
            "pred_dir" => self.pred_dir.as_ref()?.display().to_string(),
            "style_weights" => self.style_weights.as_ref()?.display().to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "lr_decay_gamma" => self.lr_decay_gamma.to_string(),
            "lambda_mae" => self.lambda_mae.to_string(),
            "lambda_ssim" => self.lambda_ssim.to_string(),
            "lambda_gms" => self.lambda_gms.to_string(),
            "lambda_style" => self.lambda_style.to_string(),
            "lambda_res" => self.lambda_res.to_string(),
            "lambda_adv" => self.lambda_adv.to_string(),
            "seed" => self.seed.to_string(),
            "mask_scales" => format_scales(&self.mask_scales),
            "mask_mode" => self.mask_mode.to_string(),
            "base_width" => self.base_width.to_string(),
            "freeze_d" => self.freeze_d.to_string(),
            "no_style" => self.no_style.to_string(),
            "resolution" => self.resolution.to_string(),
            "strategy" => self.strategy.to_string(),
            "bilateral_diameter" => self.bilateral_diameter.to_string(),
            "sigma_intensity" => self.sigma_intensity.to_string(),
            "sigma_spatial" => self.sigma_spatial.to_string(),
            "write_error_maps" => self.write_error_maps.to_string(),
            "write_overlays" => self.write_overlays.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "ablate_axis" => self.ablate_axis.to_string(),
            _ => unreachable!("render called with unregistered key {key}"),
        })
    }

    /// The `config.resolved` snapshot: every set key in registry order with
    /// its provenance as a trailing comment. Reloading the text with
    /// `--config` reproduces the values exactly (floats print in shortest
    /// round-trip form).
    pub fn resolved_text(&self) -> String {
        let mut out = String::from("# resolved run configuration; pass back via --config to reproduce\n");
        for key in KEYS {
            if let Some(value) = self.render(key) {
                out.push_str(&format!("{key} = {value}  # {}\n", self.provenance(key)));
            }
        }
        out
    }

    /// Checkpoint to read, defaulting to the best one this run wrote.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run_dir.join("best.ckpt"))
    }

    /// Where detection masks go, defaulting inside the run directory.
    pub fn pred_dir_path(&self) -> PathBuf {
        self.pred_dir.clone().unwrap_or_else(|| self.run_dir.join("detections"))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_mae: self.lambda_mae,
            lambda_ssim: self.lambda_ssim,
            lambda_gms: self.lambda_gms,
            lambda_style: if self.no_style { 0.0 } else { self.lambda_style },
            lambda_res: self.lambda_res,
            lambda_adv: self.lambda_adv,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            lr_decay_gamma: self.lr_decay_gamma,
            weights: self.loss_weights(),
            seed: self.seed,
            mask_scales: self.mask_scales.clone(),
            mask_mode: self.mask_mode,
            base_width: self.base_width,
            freeze_d: self.freeze_d,
        }
    }

    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            strategy: self.strategy,
            bilateral_diameter: self.bilateral_diameter,
            sigma_intensity: self.sigma_intensity,
            sigma_spatial: self.sigma_spatial,
            mask_scales: self.mask_scales.clone(),
            mask_mode: self.mask_mode,
            mask_seed: self.seed,
        }
    }
}

/// Split config-file text into (key, value) pairs. Later duplicates win,
/// matching how a file layers over defaults.
pub fn parse_config_text(origin: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "{}:{}: expected key = value, got '{line}'",
                origin.display(),
                idx + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Defaults, then the config file (if any), then flag overrides.
pub fn load_config(args: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (key, value) in parse_config_text(path, &text)? {
            cfg.set_key(&key, &value, Provenance::File)?;
        }
    }
    apply_overrides(&mut cfg, args)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, args: &Overrides) -> Result<()> {
    let f = Provenance::Flag;
    macro_rules! direct {
        ($field:ident, $key:literal, $wrap:expr) => {
            if let Some(v) = &args.$field {
                #[allow(clippy::redundant_closure_call)]
                {
                    cfg.$field = $wrap(v.clone());
                }
                cfg.provenance.insert($key, f);
            }
        };
    }
    direct!(data_root, "data_root", |v| v);
    direct!(run_dir, "run_dir", |v| v);
    direct!(checkpoint, "checkpoint", Some);
    direct!(pred_dir, "pred_dir", Some);
    direct!(style_weights, "style_weights", Some);
    direct!(epochs, "epochs", |v| v);
    direct!(patience, "patience", |v| v);
    direct!(batch_size, "batch_size", |v| v);
    direct!(lr_g, "lr_g", |v| v);
    direct!(lr_d, "lr_d", |v| v);
    direct!(adam_beta1, "adam_beta1", |v| v);
    direct!(adam_beta2, "adam_beta2", |v| v);
    direct!(lr_decay_gamma, "lr_decay_gamma", |v| v);
    direct!(lambda_mae, "lambda_mae", |v| v);
    direct!(lambda_ssim, "lambda_ssim", |v| v);
    direct!(lambda_gms, "lambda_gms", |v| v);
    direct!(lambda_style, "lambda_style", |v| v);
    direct!(lambda_res, "lambda_res", |v| v);
    direct!(lambda_adv, "lambda_adv", |v| v);
    direct!(seed, "seed", |v| v);
    direct!(base_width, "base_width", |v| v);
    direct!(freeze_d, "freeze_d", |v| v);
    direct!(no_style, "no_style", |v| v);
    direct!(resolution, "resolution", |v| v);
    direct!(bilateral_diameter, "bilateral_diameter", |v| v);
    direct!(sigma_intensity, "sigma_intensity", |v| v);
    direct!(sigma_spatial, "sigma_spatial", |v| v);
    direct!(write_error_maps, "write_error_maps", |v| v);
    direct!(write_overlays, "write_overlays", |v| v);
    direct!(n_train, "n_train", |v| v);
    direct!(n_test, "n_test", |v| v);
    // String-typed flags reuse the file parser so errors are identical.
    if let Some(raw) = &args.mask_scales {
        cfg.set_key("mask_scales", raw, f)?;
    }
    if let Some(raw) = &args.mask_mode {
        cfg.set_key("mask_mode", raw, f)?;
    }
    if let Some(raw) = &args.strategy {
        cfg.set_key("strategy", raw, f)?;
    }
    if let Some(raw) = &args.ablate_axis {
        cfg.set_key("ablate_axis", raw, f)?;
    }
    Ok(())
}
