//! Flat `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{BinsWeighting, LossConfig};
use crate::model::{DepthRange, HeadKind, ModelConfig, SplitterKind};
use crate::query::{check_sizes, scale_box_sizes, REFERENCE_SIZES};
use crate::tensor::LrSchedule;

/// Which loss path a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Plain encoder-decoder with the pixel loss only.
    PixelOnly,
    /// Per-pixel bins compared against centered ground-truth windows.
    Naive,
    /// Region queries with uniform weights.
    Qr,
    /// Region queries with exponentially decaying level and size weights.
    QrFoveated,
}

impl TrainingMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainingMode::PixelOnly => "pixel_only",
            TrainingMode::Naive => "naive",
            TrainingMode::Qr => "qr",
            TrainingMode::QrFoveated => "qr_foveated",
        }
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_only" => Ok(TrainingMode::PixelOnly),
            "naive" => Ok(TrainingMode::Naive),
            "qr" => Ok(TrainingMode::Qr),
            "qr_foveated" => Ok(TrainingMode::QrFoveated),
            other => Err(Error::Config(format!(
                "unknown training_mode {other:?} (expected pixel_only, naive, qr or qr_foveated)"
            ))),
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f64 or f32)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_seed: usize,
    pub n_decoder: usize,
    pub splitter: SplitterKind,
    pub d_min: f64,
    pub d_max: f64,
    pub height: usize,
    pub width: usize,
    /// Sizes at the 640x480 reference resolution.
    pub box_sizes: Vec<usize>,
    /// Rescale `box_sizes` to the training resolution.
    pub box_scaling: bool,
    pub boxes_per_class: usize,
    pub gt_cap: usize,
    pub roi_samples: usize,
    pub loss: LossConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_flat_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Optimizer steps; when 0, `epochs` full passes are run instead.
    pub steps: usize,
    pub epochs: usize,
    pub num_scenes: usize,
    pub eval_scenes: usize,
    pub data_seed: u64,
    pub eval_data_seed: u64,
    pub seed: u64,
    pub training_mode: TrainingMode,
    pub precision: Precision,
    pub naive_window: usize,
    pub naive_locations: usize,
    pub analysis_windows: Vec<usize>,
    pub density_locations: usize,
    /// Write the per-level, per-class bins loss terms of every step.
    pub breakdown: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_seed: 4,
            n_decoder: 4,
            splitter: SplitterKind::linear_norm(),
            d_min: 1e-3,
            d_max: 10.0,
            height: 64,
            width: 64,
            box_sizes: REFERENCE_SIZES.to_vec(),
            box_scaling: true,
            boxes_per_class: 200,
            gt_cap: 512,
            roi_samples: 2,
            loss: LossConfig::default(),
            lr: 3.57e-4,
            weight_decay: 0.1,
            lr_decay_factor: 1e4,
            lr_flat_fraction: 0.7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 2000,
            epochs: 10,
            num_scenes: 200,
            eval_scenes: 50,
            data_seed: 0,
            eval_data_seed: 1,
            seed: 0,
            training_mode: TrainingMode::QrFoveated,
            precision: Precision::F64,
            naive_window: 5,
            naive_locations: 64,
            analysis_windows: REFERENCE_SIZES.to_vec(),
            density_locations: 4,
            breakdown: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_seed" => self.n_seed = parse(key, v)?,
            "n_decoder" => self.n_decoder = parse(key, v)?,
            "splitter" => {
                let eps = match self.splitter {
                    SplitterKind::LinearNorm { eps } => eps,
                    _ => SplitterKind::DEFAULT_EPS,
                };
                self.splitter = match v.parse()? {
                    SplitterKind::LinearNorm { .. } => SplitterKind::LinearNorm { eps },
                    other => other,
                };
            }
            "linear_norm_eps" => {
                let eps = parse(key, v)?;
                if let SplitterKind::LinearNorm { eps: e } = &mut self.splitter {
                    *e = eps;
                } else if eps != SplitterKind::DEFAULT_EPS {
                    return Err(Error::Config("linear_norm_eps set for a non linear-norm splitter".into()));
                }
            }
            "d_min" => self.d_min = parse(key, v)?,
            "d_max" => self.d_max = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "box_sizes" => self.box_sizes = parse_list(key, v)?,
            "box_scaling" => self.box_scaling = parse(key, v)?,
            "boxes_per_class" => self.boxes_per_class = parse(key, v)?,
            "gt_cap" => self.gt_cap = parse(key, v)?,
            "roi_samples" => self.roi_samples = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "gamma_l" => self.loss.gamma_l = parse(key, v)?,
            "gamma_b" => self.loss.gamma_b = parse(key, v)?,
            "si_lambda" => self.loss.si_lambda = parse(key, v)?,
            "si_alpha" => self.loss.si_alpha = parse(key, v)?,
            "chamfer_reduction" => self.loss.chamfer_reduction = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_flat_fraction" => self.lr_flat_fraction = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "num_scenes" => self.num_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "eval_data_seed" => self.eval_data_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "training_mode" => self.training_mode = v.parse()?,
            "precision" => self.precision = v.parse()?,
            "naive_window" => self.naive_window = parse(key, v)?,
            "naive_locations" => self.naive_locations = parse(key, v)?,
            "analysis_windows" => self.analysis_windows = parse_list(key, v)?,
            "density_locations" => self.density_locations = parse(key, v)?,
            "breakdown" => self.breakdown = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("boxes_per_class", self.boxes_per_class),
            ("gt_cap", self.gt_cap),
            ("roi_samples", self.roi_samples),
            ("batch_size", self.batch_size),
            ("naive_locations", self.naive_locations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::Config("either steps or epochs must be positive".into()));
        }
        let factor = 1usize << self.n_decoder;
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be divisible by 2^n_decoder = {factor}",
                self.height, self.width
            )));
        }
        if !(self.lr > 0.0 && self.lr_decay_factor >= 1.0 && (0.0..=1.0).contains(&self.lr_flat_fraction)) {
            return Err(Error::Config("learning rate schedule constants out of range".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("optimizer constants out of range".into()));
        }
        if self.naive_window % 2 == 0 {
            return Err(Error::Config("naive_window must be odd".into()));
        }
        if self.analysis_windows.is_empty() || self.analysis_windows.iter().any(|w| w % 2 == 0) {
            return Err(Error::Config("analysis_windows must be odd sizes".into()));
        }
        self.effective_box_sizes()?;
        Ok(())
    }

    pub fn range(&self) -> DepthRange {
        DepthRange {
            d_min: self.d_min,
            d_max: self.d_max,
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_seed: self.n_seed,
            n_decoder: self.n_decoder,
            splitter: self.splitter,
            range: self.range(),
            head: if self.training_mode == TrainingMode::PixelOnly {
                HeadKind::Direct
            } else {
                HeadKind::LocalBins
            },
        }
    }

    pub fn effective_box_sizes(&self) -> Result<Vec<usize>> {
        if self.box_scaling {
            scale_box_sizes(&self.box_sizes, self.extent())
        } else {
            check_sizes(&self.box_sizes, self.extent())?;
            Ok(self.box_sizes.clone())
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            flat_fraction: self.lr_flat_fraction,
            decay_factor: self.lr_decay_factor,
        }
    }

    pub fn weighting(&self) -> BinsWeighting {
        match self.training_mode {
            TrainingMode::QrFoveated => BinsWeighting::Foveated {
                gamma_l: self.loss.gamma_l,
                gamma_b: self.loss.gamma_b,
            },
            _ => BinsWeighting::Uniform,
        }
    }

    /// Total optimizer steps for a corpus of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n.div_ceil(self.batch_size)
        }
    }

    /// Serializes every key; parsing the result gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_seed", self.n_seed.to_string());
        kv("n_decoder", self.n_decoder.to_string());
        kv("splitter", self.splitter.name().into());
        if let SplitterKind::LinearNorm { eps } = self.splitter {
            kv("linear_norm_eps", eps.to_string());
        }
        kv("d_min", self.d_min.to_string());
        kv("d_max", self.d_max.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("box_sizes", join(&self.box_sizes));
        kv("box_scaling", self.box_scaling.to_string());
        kv("boxes_per_class", self.boxes_per_class.to_string());
        kv("gt_cap", self.gt_cap.to_string());
        kv("roi_samples", self.roi_samples.to_string());
        kv("beta", self.loss.beta.to_string());
        kv("gamma_l", self.loss.gamma_l.to_string());
        kv("gamma_b", self.loss.gamma_b.to_string());
        kv("si_lambda", self.loss.si_lambda.to_string());
        kv("si_alpha", self.loss.si_alpha.to_string());
        kv("chamfer_reduction", self.loss.chamfer_reduction.name().into());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("lr_flat_fraction", self.lr_flat_fraction.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("num_scenes", self.num_scenes.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("eval_data_seed", self.eval_data_seed.to_string());
        kv("seed", self.seed.to_string());
        kv("training_mode", self.training_mode.to_string());
        kv("precision", self.precision.to_string());
        kv("naive_window", self.naive_window.to_string());
        kv("naive_locations", self.naive_locations.to_string());
        kv("analysis_windows", join(&self.analysis_windows));
        kv("density_locations", self.density_locations.to_string());
        kv("breakdown", self.breakdown.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = TrainConfig::parse(
            "# toy run\n\nn_seed = 2   # fewer bins\nsplitter = sigmoid\ntraining_mode=naive\nbox_sizes = 3, 5\nbox_scaling = false\n",
        )
        .unwrap();
        assert_eq!(cfg.n_seed, 2);
        assert_eq!(cfg.splitter, SplitterKind::Sigmoid);
        assert_eq!(cfg.training_mode, TrainingMode::Naive);
        assert_eq!(cfg.effective_box_sizes().unwrap(), vec![3, 5]);
        let eps = TrainConfig::parse("linear_norm_eps = 0.001").unwrap();
        assert_eq!(eps.splitter, SplitterKind::LinearNorm { eps: 0.001 });
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("n_seed").is_err());
        assert!(TrainConfig::parse("n_seed = -1").is_err());
        assert!(TrainConfig::parse("n_seed = 0").is_err());
        assert!(TrainConfig::parse("height = 60").is_err());
        assert!(TrainConfig::parse("d_min = 5\nd_max = 1").is_err());
        assert!(TrainConfig::parse("gamma_l = 0").is_err());
        assert!(TrainConfig::parse("height = 32\nwidth = 32\nbox_scaling = false").is_err());
    }

    #[test]
    fn default_sizes_at_desk_resolution() {
        assert_eq!(TrainConfig::default().effective_box_sizes().unwrap(), vec![3, 5, 7, 9, 11]);
        let big = TrainConfig {
            height: 480,
            width: 640,
            ..TrainConfig::default()
        };
        assert_eq!(big.effective_box_sizes().unwrap(), REFERENCE_SIZES.to_vec());
    }
}
