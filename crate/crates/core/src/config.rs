//! Run configuration: a flat `key = value` text format with dotted section
//! keys, `#` comments, UTF-8. Every field has a documented default and
//! unknown keys are rejected (typo safety). The same `key=value` grammar is
//! accepted as command-line overrides.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::inference::BlendMode;
use crate::optim::{LrSchedule, TrainHyper};
use crate::preprocess::BernsenParams;
use crate::unet::{UNetConfig, VariantKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    Zscore,
    Minmax,
}

impl NormalizeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormalizeMode::Zscore),
            "minmax" => Ok(NormalizeMode::Minmax),
            other => Err(Error::Config(format!("unknown normalize mode '{}', expected zscore | minmax", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_images: Vec<PathBuf>,
    pub train_masks: Vec<PathBuf>,
    pub val_image: Option<PathBuf>,
    pub val_mask: Option<PathBuf>,
    pub fg_bias: f64,
    pub augment: bool,
    pub normalize: NormalizeMode,
    /// Slice spacing assigned when stacking PGM imports.
    pub spacing: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: Vec::new(),
            train_masks: Vec::new(),
            val_image: None,
            val_mask: None,
            fg_bias: 0.5,
            augment: true,
            normalize: NormalizeMode::Zscore,
            spacing: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub target_porosity: f64,
    pub radius: [f64; 2],
    pub elongation: [f64; 2],
    pub material_gray: u8,
    pub pore_gray: u8,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = crate::data::SynthSpec::default();
        Self {
            dims: s.dims,
            target_porosity: s.target_porosity,
            radius: s.radius_range,
            elongation: s.elongation_range,
            material_gray: s.material_gray,
            pore_gray: s.pore_gray,
            noise_sigma: s.noise_sigma,
            blur_sigma: s.blur_sigma,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self, spacing: f64, seed: u64) -> crate::data::SynthSpec {
        crate::data::SynthSpec {
            dims: self.dims,
            target_porosity: self.target_porosity,
            radius_range: self.radius,
            elongation_range: self.elongation,
            material_gray: self.material_gray,
            pore_gray: self.pore_gray,
            noise_sigma: self.noise_sigma,
            blur_sigma: self.blur_sigma,
            spacing,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub quantize_lo: u16,
    pub quantize_hi: u16,
    pub median_radius: usize,
    pub nlm_h: f64,
    pub nlm_patch_radius: usize,
    pub nlm_search_radius: usize,
    pub bernsen: BernsenParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            quantize_lo: 0,
            quantize_hi: 65535,
            median_radius: 1,
            nlm_h: 10.0,
            nlm_patch_radius: 1,
            nlm_search_radius: 5,
            bernsen: BernsenParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub threshold: f64,
    pub blend: BlendMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { patch: [32; 3], stride: [32; 3], threshold: 0.5, blend: BlendMode::Uniform }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainIoConfig {
    pub eval_every: u64,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainIoConfig {
    fn default() -> Self {
        Self { eval_every: 100, out_dir: PathBuf::from("runs/default"), resume: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Everything a run needs, assembled from defaults, an optional config file,
/// and `key=value` overrides (in that order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: UNetConfig,
    pub schedule: LrSchedule,
    pub hyper: TrainHyper,
    pub adam: AdamConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub inference: InferenceConfig,
    pub train: TrainIoConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", value, key)))
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> =
        value.split_whitespace().map(|p| parse_num(key, p)).collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("key '{}' needs 3 values, got '{}'", key, value)));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_pair_f64(key: &str, value: &str) -> Result<[f64; 2]> {
    let parts: Vec<f64> =
        value.split_whitespace().map(|p| parse_num(key, p)).collect::<Result<_>>()?;
    if parts.len() != 2 {
        return Err(Error::Config(format!("key '{}' needs 2 values, got '{}'", key, value)));
    }
    Ok([parts[0], parts[1]])
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("bad value '{}' for key '{}', expected true|false", other, key))),
    }
}

fn parse_paths(value: &str) -> Vec<PathBuf> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,

            "model.variant" => self.model.variant = VariantKind::parse(v)?,
            "model.in_channels" => self.model.in_channels = parse_num(key, v)?,
            "model.out_channels" => self.model.out_channels = parse_num(key, v)?,
            "model.levels" => self.model.levels = parse_num(key, v)?,
            "model.base_channels" => self.model.base_channels = parse_num(key, v)?,
            "model.gn_channels_per_group" => self.model.gn_channels_per_group = parse_num(key, v)?,

            "optim.initial_lr" => self.schedule.initial_lr = parse_num(key, v)?,
            "optim.milestones" => {
                self.schedule.milestones =
                    v.split_whitespace().map(|p| parse_num(key, p)).collect::<Result<_>>()?
            }
            "optim.gamma" => self.schedule.gamma = parse_num(key, v)?,
            "optim.weight_decay" => self.hyper.weight_decay = parse_num(key, v)?,
            "optim.total_iters" => self.hyper.total_iters = parse_num(key, v)?,
            "optim.batch_size" => self.hyper.batch_size = parse_num(key, v)?,
            "optim.patch" => self.hyper.patch = parse_triple(key, v)?,
            "optim.stride" => self.hyper.stride = parse_triple(key, v)?,
            "optim.beta1" => self.adam.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.adam.beta2 = parse_num(key, v)?,
            "optim.eps" => self.adam.eps = parse_num(key, v)?,

            "data.train_images" => self.data.train_images = parse_paths(v),
            "data.train_masks" => self.data.train_masks = parse_paths(v),
            "data.val_image" => self.data.val_image = parse_opt_path(v),
            "data.val_mask" => self.data.val_mask = parse_opt_path(v),
            "data.fg_bias" => self.data.fg_bias = parse_num(key, v)?,
            "data.augment" => self.data.augment = parse_bool(key, v)?,
            "data.normalize" => self.data.normalize = NormalizeMode::parse(v)?,
            "data.spacing" => self.data.spacing = parse_num(key, v)?,

            "synth.dims" => self.synth.dims = parse_triple(key, v)?,
            "synth.target_porosity" => self.synth.target_porosity = parse_num(key, v)?,
            "synth.radius" => self.synth.radius = parse_pair_f64(key, v)?,
            "synth.elongation" => self.synth.elongation = parse_pair_f64(key, v)?,
            "synth.material_gray" => self.synth.material_gray = parse_num(key, v)?,
            "synth.pore_gray" => self.synth.pore_gray = parse_num(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_num(key, v)?,
            "synth.blur_sigma" => self.synth.blur_sigma = parse_num(key, v)?,

            "quantize.lo" => self.preprocess.quantize_lo = parse_num(key, v)?,
            "quantize.hi" => self.preprocess.quantize_hi = parse_num(key, v)?,
            "median.radius" => self.preprocess.median_radius = parse_num(key, v)?,
            "nlm.h" => self.preprocess.nlm_h = parse_num(key, v)?,
            "nlm.patch_radius" => self.preprocess.nlm_patch_radius = parse_num(key, v)?,
            "nlm.search_radius" => self.preprocess.nlm_search_radius = parse_num(key, v)?,
            "bernsen.window_radius" => self.preprocess.bernsen.window_radius = parse_num(key, v)?,
            "bernsen.c_min" => self.preprocess.bernsen.c_min = parse_num(key, v)?,
            "bernsen.low_level" => self.preprocess.bernsen.low_level = parse_num(key, v)?,

            "inference.patch" => self.inference.patch = parse_triple(key, v)?,
            "inference.stride" => self.inference.stride = parse_triple(key, v)?,
            "inference.threshold" => self.inference.threshold = parse_num(key, v)?,
            "inference.blend" => self.inference.blend = BlendMode::parse(v)?,

            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            "train.out_dir" => self.train.out_dir = PathBuf::from(v),
            "train.resume" => self.train.resume = parse_opt_path(v),

            other => return Err(Error::Config(format!("unknown configuration key '{}'", other))),
        }
        Ok(())
    }

    /// Parses the config text: `key = value` lines, `#` comments, UTF-8.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: '{}' is not 'key = value'", lineno + 1, raw.trim()))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` command-line overrides after the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{}' is not key=value", item))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.data.fg_bias) {
            return Err(Error::Config(format!("data.fg_bias must be in [0,1], got {}", self.data.fg_bias)));
        }
        if self.hyper.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be >= 1".into()));
        }
        let div = self.model.spatial_divisor();
        for &ext in &self.hyper.patch {
            if ext % div != 0 {
                return Err(Error::Config(format!(
                    "optim.patch extent {} is not divisible by 2^(levels-1) = {}",
                    ext, div
                )));
            }
        }
        if self.data.train_images.len() != self.data.train_masks.len() {
            return Err(Error::Config(format!(
                "data.train_images lists {} paths but data.train_masks lists {}",
                self.data.train_images.len(),
                self.data.train_masks.len()
            )));
        }
        if self.data.val_image.is_some() != self.data.val_mask.is_some() {
            return Err(Error::Config("data.val_image and data.val_mask must be set together".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.schedule.initial_lr, 2e-4);
        assert_eq!(cfg.schedule.milestones, vec![600, 1000, 1400]);
        assert_eq!(cfg.schedule.gamma, 0.5);
        assert_eq!(cfg.hyper.weight_decay, 1e-4);
        assert_eq!(cfg.hyper.total_iters, 2000);
        assert_eq!(cfg.hyper.batch_size, 1);
        assert_eq!(cfg.model.gn_channels_per_group, 1);
        assert_eq!(cfg.hyper.stride, [32, 32, 32]);
    }

    #[test]
    fn parses_comments_sections_and_triples() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# a comment\n\
             seed = 7\n\
             model.variant = residual_symmetric  # trailing comment\n\
             optim.patch = 16 16 16\n\
             optim.milestones = 10 20 30\n\
             data.train_images = a.vol, b.vol\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.variant, VariantKind::ResidualSymmetric);
        assert_eq!(cfg.hyper.patch, [16; 3]);
        assert_eq!(cfg.schedule.milestones, vec![10, 20, 30]);
        assert_eq!(cfg.data.train_images.len(), 2);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("model.varriant = conv_bn_relu\n").unwrap_err();
        assert!(err.to_string().contains("model.varriant"), "{err}");
    }

    #[test]
    fn overrides_apply_after_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 1\n").unwrap();
        cfg.apply_overrides(&["seed=2".into(), "optim.gamma=0.25".into()]).unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.schedule.gamma, 0.25);
        assert!(cfg.apply_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn validation_checks_patch_divisibility() {
        let mut cfg = RunConfig::default();
        cfg.set("model.levels", "3").unwrap();
        cfg.set("optim.patch", "30 32 32").unwrap();
        assert!(cfg.validate().is_err());
    }
}
