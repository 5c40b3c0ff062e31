//! Backbone, LocalBins head and the parameter store that holds both.

mod backbone;
mod bins;
mod mlp;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use backbone::{decoder_channels, encoder_channels, Backbone, PyramidFeatures, BOTTLENECK_CHANNELS};
pub use bins::{
    bin_centers, hybrid_regress, splitter_activation, BinState, LevelVars, SplitOutput, SEED_EPS,
    SPLIT_INPUT_EPS,
};
pub use mlp::{pointwise_mlp, PointwiseMlp};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Var};

pub const EMBED_DIM: usize = 128;
pub const EMBED_HIDDEN: usize = 128;
pub const SEED_HIDDEN: usize = 256;
pub const SPLIT_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
            return Err(Error::Config(format!(
                "depth range needs 0 < d_min < d_max, got ({d_min}, {d_max})"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn span(&self) -> f64 {
        self.d_max - self.d_min
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.d_min && d <= self.d_max
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { d_min: 1e-3, d_max: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitterKind {
    Constant,
    Sigmoid,
    LinearNorm { eps: f64 },
}

impl SplitterKind {
    pub const DEFAULT_EPS: f64 = 1e-4;

    pub fn linear_norm() -> Self {
        SplitterKind::LinearNorm { eps: Self::DEFAULT_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitterKind::LinearNorm { eps } if !(eps > 0.0 && eps.is_finite()) => {
                Err(Error::Config(format!("linear norm epsilon must be positive, got {eps}")))
            }
            _ => Ok(()),
        }
    }

    /// Splitter MLP output channels needed to split `m` bins.
    pub fn mlp_outputs(&self, m: usize) -> Option<usize> {
        match self {
            SplitterKind::Constant => None,
            SplitterKind::Sigmoid => Some(m),
            SplitterKind::LinearNorm { .. } => Some(2 * m),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitterKind::Constant => "constant",
            SplitterKind::Sigmoid => "sigmoid",
            SplitterKind::LinearNorm { .. } => "linear_norm",
        }
    }
}

impl fmt::Display for SplitterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SplitterKind::Constant),
            "sigmoid" => Ok(SplitterKind::Sigmoid),
            "linear_norm" | "linearnorm" => Ok(SplitterKind::linear_norm()),
            other => Err(Error::Config(format!(
                "unknown splitter {other:?} (expected constant, sigmoid or linear_norm)"
            ))),
        }
    }
}

/// Which head turns the top decoder feature into depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Adaptive local bins with hybrid regression.
    LocalBins,
    /// Plain encoder-decoder: one channel squashed into the depth range.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_seed: usize,
    pub n_decoder: usize,
    pub splitter: SplitterKind,
    pub range: DepthRange,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_seed: 4,
            n_decoder: 4,
            splitter: SplitterKind::linear_norm(),
            range: DepthRange::default(),
            head: HeadKind::LocalBins,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seed == 0 {
            return Err(Error::Config("n_seed must be at least 1".into()));
        }
        if self.n_decoder > 7 {
            return Err(Error::Config(format!("n_decoder {} is too deep", self.n_decoder)));
        }
        self.splitter.validate()?;
        DepthRange::new(self.range.d_min, self.range.d_max)?;
        Ok(())
    }

    /// Bin count at level `l` (0 = bottleneck).
    pub fn bins_at(&self, level: usize) -> usize {
        self.n_seed << level
    }

    pub fn output_bins(&self) -> usize {
        self.bins_at(self.n_decoder)
    }
}

/// Everything recorded on the tape by one spatial forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: PyramidFeatures,
    /// Bin state per level `0..=n`; empty for the direct head.
    pub levels: Vec<LevelVars>,
    pub logits: Var,
    /// `[N, 1, H, W]` predicted depth.
    pub depth: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    embeds: Vec<PointwiseMlp>,
    seed: PointwiseMlp,
    splitters: Vec<Option<PointwiseMlp>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.n_decoder);
        let embeds = (0..=config.n_decoder)
            .map(|l| PointwiseMlp::new(format!("embed.{l}"), backbone.level_channels(l), EMBED_HIDDEN, EMBED_DIM))
            .collect();
        let seed = PointwiseMlp::new("seed", EMBED_DIM, SEED_HIDDEN, config.n_seed);
        let splitters = (1..=config.n_decoder)
            .map(|k| {
                config
                    .splitter
                    .mlp_outputs(config.bins_at(k - 1))
                    .map(|out| PointwiseMlp::new(format!("split.{k}"), EMBED_DIM, SPLIT_HIDDEN, out))
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            embeds,
            seed,
            splitters,
        })
    }

    /// Freshly initialized parameters.
    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, rng);
        let head_out = match self.config.head {
            HeadKind::LocalBins => self.config.output_bins(),
            HeadKind::Direct => 1,
        };
        self.backbone.init_head(&mut store, rng, head_out);
        if self.config.head == HeadKind::LocalBins {
            for mlp in &self.embeds {
                mlp.init(&mut store, rng);
            }
            self.seed.init(&mut store, rng);
            for mlp in self.splitters.iter().flatten() {
                mlp.init(&mut store, rng);
            }
        }
        store
    }

    pub fn embed_mlp(&self, level: usize) -> Result<&PointwiseMlp> {
        self.embeds
            .get(level)
            .ok_or_else(|| Error::Invalid(format!("no embedding layer for level {level}")))
    }

    pub fn seed_mlp(&self) -> &PointwiseMlp {
        &self.seed
    }

    pub fn splitter_mlp(&self, level: usize) -> Result<Option<&PointwiseMlp>> {
        if level == 0 || level > self.config.n_decoder {
            return Err(Error::Invalid(format!(
                "no splitter for level {level} (valid 1..={})",
                self.config.n_decoder
            )));
        }
        Ok(self.splitters[level - 1].as_ref())
    }

    /// Full spatial forward pass on `[N, 3, H, W]` images.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<ForwardOutput> {
        let pyramid = self.backbone.encode_decode(tape, store, image)?;
        let range = self.config.range;
        match self.config.head {
            HeadKind::LocalBins => {
                let levels = self.localbins_levels(tape, store, &pyramid)?;
                let logits = self
                    .backbone
                    .output_logits(tape, store, pyramid.top(), self.config.output_bins())?;
                let widths = levels.last().expect("at least the seed level").widths;
                let depth = bins::hybrid_regress_vars(tape, widths, logits, range)?;
                Ok(ForwardOutput {
                    pyramid,
                    levels,
                    logits,
                    depth,
                })
            }
            HeadKind::Direct => {
                let logits = self.backbone.output_logits(tape, store, pyramid.top(), 1)?;
                let s = tape.sigmoid(logits)?;
                let scaled = tape.scale(s, T::lit(range.span()))?;
                let depth = tape.add_scalar(scaled, T::lit(range.d_min))?;
                Ok(ForwardOutput {
                    pyramid,
                    levels: Vec::new(),
                    logits,
                    depth,
                })
            }
        }
    }

    /// Spatial LocalBins chain over a feature pyramid.
    pub fn localbins_levels<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &PyramidFeatures,
    ) -> Result<Vec<LevelVars>> {
        if pyramid.n() != self.config.n_decoder {
            return Err(Error::Invalid(format!(
                "pyramid has {} decoder levels, model expects {}",
                pyramid.n(),
                self.config.n_decoder
            )));
        }
        let feats: Vec<Var> = (0..=pyramid.n()).map(|l| pyramid.level(l)).collect();
        bins::run_chain(self, tape, store, &feats, true)
    }

    /// The same chain on pooled `[B, C_l]` feature rows, one per level.
    pub fn pooled_levels<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pooled: &[Var],
    ) -> Result<Vec<LevelVars>> {
        if pooled.len() != self.config.n_decoder + 1 {
            return Err(Error::Invalid(format!(
                "{} pooled levels for a model with {} levels",
                pooled.len(),
                self.config.n_decoder + 1
            )));
        }
        bins::run_chain(self, tape, store, pooled, false)
    }
}
