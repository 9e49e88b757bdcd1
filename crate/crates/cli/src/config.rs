//! `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deiqt::data::DistortionKind;
use deiqt::training::TrainConfig;
use deiqt::{Error, ModelConfig, Precision, Result, Variant};

/// Everything a command needs: model, optimizer, data and harness settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training manifest; when absent a synthetic corpus is generated in memory.
    pub manifest: Option<PathBuf>,
    /// Separate evaluation manifest (cross-dataset evaluation).
    pub test_manifest: Option<PathBuf>,
    pub n_base: usize,
    pub levels: usize,
    pub image_size: usize,
    pub kinds: Vec<DistortionKind>,
    pub train_frac: f64,
    pub test_frac: f64,
    pub eval_crops: usize,
    pub repeats: usize,
    pub hist_bins: usize,
    /// Training fractions swept by `protocol data-efficiency`.
    pub fractions: Vec<f64>,
    /// Checkpoint whose encoder tensors seed the model before training.
    pub init_encoder: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            manifest: None,
            test_manifest: None,
            n_base: 100,
            levels: 5,
            image_size: 24,
            kinds: DistortionKind::ALL.to_vec(),
            train_frac: 0.8,
            test_frac: 0.2,
            eval_crops: 10,
            repeats: 10,
            hist_bins: 32,
            fractions: vec![0.2, 0.4, 0.6],
            init_encoder: None,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "precision",
    "patch_size",
    "token_dim",
    "heads",
    "encoder_depth",
    "decoder_depth",
    "panel_size",
    "mlp_ratio",
    "channels",
    "crop_size",
    "variant",
    "epochs",
    "base_lr",
    "lr_decay_factor",
    "decay_every",
    "batch_size",
    "crops_per_image",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "smooth_l1_beta",
    "normalize_scores",
    "max_steps",
    "manifest",
    "test_manifest",
    "n_base",
    "levels",
    "image_size",
    "kinds",
    "train_frac",
    "test_frac",
    "eval_crops",
    "repeats",
    "hist_bins",
    "fractions",
    "init_encoder",
];

/// Keys that describe the architecture; checkpoints store only these.
pub const MODEL_KEYS: &[&str] = &[
    "patch_size",
    "token_dim",
    "heads",
    "encoder_depth",
    "decoder_depth",
    "panel_size",
    "mlp_ratio",
    "channels",
    "crop_size",
    "variant",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}` (expected true/false)"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "precision" => {
                let bits: u32 = parse(key, value)?;
                t.precision = Precision::from_bits(bits)
                    .ok_or_else(|| Error::Config(format!("precision must be 32 or 64, got {value}")))?;
            }
            "patch_size" => m.patch_size = parse(key, value)?,
            "token_dim" => m.token_dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "encoder_depth" => m.encoder_depth = parse(key, value)?,
            "decoder_depth" => m.decoder_depth = parse(key, value)?,
            "panel_size" => m.panel_size = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "crop_size" => m.crop_size = parse(key, value)?,
            "variant" => m.variant = value.parse::<Variant>()?,
            "epochs" => t.epochs = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "decay_every" => t.decay_every_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "crops_per_image" => t.crops_per_image = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "smooth_l1_beta" => t.smooth_l1_beta = parse(key, value)?,
            "normalize_scores" => t.normalize_scores = parse_bool(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "manifest" => self.manifest = optional_path(value),
            "test_manifest" => self.test_manifest = optional_path(value),
            "n_base" => self.n_base = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "kinds" => {
                self.kinds = value
                    .split(',')
                    .map(|k| k.trim().parse())
                    .collect::<Result<_>>()?;
            }
            "train_frac" => self.train_frac = parse(key, value)?,
            "test_frac" => self.test_frac = parse(key, value)?,
            "eval_crops" => self.eval_crops = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "hist_bins" => self.hist_bins = parse(key, value)?,
            "fractions" => {
                self.fractions = value
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<_>>()?;
            }
            "init_encoder" => self.init_encoder = optional_path(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "seed" => t.seed.to_string(),
            "precision" => t.precision.bits().to_string(),
            "patch_size" => m.patch_size.to_string(),
            "token_dim" => m.token_dim.to_string(),
            "heads" => m.heads.to_string(),
            "encoder_depth" => m.encoder_depth.to_string(),
            "decoder_depth" => m.decoder_depth.to_string(),
            "panel_size" => m.panel_size.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "channels" => m.channels.to_string(),
            "crop_size" => m.crop_size.to_string(),
            "variant" => m.variant.to_string(),
            "epochs" => t.epochs.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "lr_decay_factor" => t.lr_decay_factor.to_string(),
            "decay_every" => t.decay_every_epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "crops_per_image" => t.crops_per_image.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "smooth_l1_beta" => t.smooth_l1_beta.to_string(),
            "normalize_scores" => t.normalize_scores.to_string(),
            "max_steps" => t.max_steps.to_string(),
            "manifest" => path_text(&self.manifest),
            "test_manifest" => path_text(&self.test_manifest),
            "n_base" => self.n_base.to_string(),
            "levels" => self.levels.to_string(),
            "image_size" => self.image_size.to_string(),
            "kinds" => self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            "train_frac" => self.train_frac.to_string(),
            "test_frac" => self.test_frac.to_string(),
            "eval_crops" => self.eval_crops.to_string(),
            "repeats" => self.repeats.to_string(),
            "hist_bins" => self.hist_bins.to_string(),
            "fractions" => self.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "init_encoder" => path_text(&self.init_encoder),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Errors carry the line number.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Effective configuration, one `key = value` per line, every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.levels < 2 || self.n_base == 0 || self.kinds.is_empty() {
            return Err(Error::Config("synthetic corpus needs n_base >= 1, levels >= 2 and a kind".into()));
        }
        if self.image_size < self.model.crop_size {
            return Err(Error::Config(format!(
                "image_size {} is smaller than crop_size {}",
                self.image_size, self.model.crop_size
            )));
        }
        for (name, f) in [("train_frac", self.train_frac), ("test_frac", self.test_frac)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.fractions.is_empty()
            || self.fractions.iter().any(|&f| !(f > 0.0 && f + self.test_frac <= 1.0 + 1e-12))
        {
            return Err(Error::Config(format!(
                "fractions must be positive and leave room for test_frac {}",
                self.test_frac
            )));
        }
        if self.eval_crops == 0 || self.repeats == 0 || self.hist_bins == 0 {
            return Err(Error::Config("eval_crops, repeats and hist_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Model keys only, for the checkpoint config block.
pub fn model_text(model: &ModelConfig) -> String {
    let cfg = RunConfig {
        model: model.clone(),
        ..RunConfig::default()
    };
    let mut out = String::new();
    for key in MODEL_KEYS {
        let _ = writeln!(out, "{key} = {}", cfg.get(key).expect("listed key"));
    }
    out
}

pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed model line `{line}`")))?;
        let k = k.trim();
        if !MODEL_KEYS.contains(&k) {
            return Err(Error::Config(format!("unexpected key `{k}` in model block")));
        }
        cfg.set(k, v)?;
    }
    Ok(cfg.model)
}
