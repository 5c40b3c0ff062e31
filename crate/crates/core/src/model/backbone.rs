//! Small encoder-decoder with skip connections.
//!
//! `n` stride-2 encoder stages take the image down to `H / 2^n`, a bottleneck
//! convolution maps to [`BOTTLENECK_CHANNELS`], and `n` decoder stages each
//! upsample the previous level, concatenate the encoder skip at the new
//! resolution and apply a 3x3 convolution with ReLU. Decoder level `n` is at
//! full input resolution.

use rand::Rng;

use super::params::{kaiming_bound, uniform, ParamStore};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

pub const BOTTLENECK_CHANNELS: usize = 128;
pub const IMAGE_CHANNELS: usize = 3;

pub fn encoder_channels(stage: usize) -> usize {
    (16usize << (stage - 1)).min(128)
}

pub fn decoder_channels(level: usize) -> usize {
    (BOTTLENECK_CHANNELS >> level).max(16)
}

/// Feature maps handed to the bins module.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub bottleneck: Var,
    /// Level `i` (numbered from 1, stored at index `i - 1`) has spatial extent
    /// `H / 2^(n - i)`.
    pub decoder: Vec<Var>,
}

impl PyramidFeatures {
    pub fn n(&self) -> usize {
        self.decoder.len()
    }

    /// Feature map at level `l`, where level 0 is the bottleneck.
    pub fn level(&self, l: usize) -> Var {
        if l == 0 {
            self.bottleneck
        } else {
            self.decoder[l - 1]
        }
    }

    pub fn top(&self) -> Var {
        self.decoder.last().copied().unwrap_or(self.bottleneck)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub n: usize,
}

impl Backbone {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// Channel count of the feature map at level `l` (0 = bottleneck).
    pub fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            BOTTLENECK_CHANNELS
        } else {
            decoder_channels(l)
        }
    }

    fn skip_channels(&self, level: usize) -> usize {
        let stage = self.n - level;
        if stage == 0 {
            IMAGE_CHANNELS
        } else {
            encoder_channels(stage)
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let mut conv = |store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize| {
            let fan_in = cin * 9;
            store.insert(format!("{name}.w"), uniform(rng, &[cout, cin, 3, 3], kaiming_bound(fan_in)));
            store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        let mut cin = IMAGE_CHANNELS;
        for stage in 1..=self.n {
            conv(store, &format!("enc.{stage}"), encoder_channels(stage), cin);
            cin = encoder_channels(stage);
        }
        conv(store, "bottleneck", BOTTLENECK_CHANNELS, cin);
        for level in 1..=self.n {
            let cin = self.level_channels(level - 1) + self.skip_channels(level);
            conv(store, &format!("dec.{level}"), decoder_channels(level), cin);
        }
    }

    /// Initializes the output convolution producing `out_channels` logits.
    pub fn init_head<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, out_channels: usize) {
        let cin = self.level_channels(self.n);
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        store.insert("head.w", uniform(rng, &[out_channels, cin, 3, 3], bound));
        store.insert("head.b", Tensor::zeros(&[out_channels]));
    }

    fn conv_relu<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let w = store.bind(tape, &format!("{name}.w"))?;
        let b = store.bind(tape, &format!("{name}.b"))?;
        let y = tape.conv2d(x, w, Some(b), stride, 1)?;
        tape.relu(y)
    }

    pub fn encode_decode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<PyramidFeatures> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(shape_err!("backbone expects [N, 3, H, W], got {shape:?}"));
        }
        let factor = 1usize << self.n;
        if shape[2] % factor != 0 || shape[3] % factor != 0 {
            return Err(shape_err!(
                "input {}x{} is not divisible by 2^{} = {factor}",
                shape[2],
                shape[3],
                self.n
            ));
        }
        let mut skips = vec![image];
        let mut x = image;
        for stage in 1..=self.n {
            x = Self::conv_relu(tape, store, &format!("enc.{stage}"), x, 2)?;
            skips.push(x);
        }
        let bottleneck = Self::conv_relu(tape, store, "bottleneck", x, 1)?;
        let mut decoder = Vec::with_capacity(self.n);
        let mut prev = bottleneck;
        for level in 1..=self.n {
            let up = tape.upsample2x(prev)?;
            let skip = skips[self.n - level];
            let cat = tape.concat_channels(&[up, skip])?;
            prev = Self::conv_relu(tape, store, &format!("dec.{level}"), cat, 1)?;
            decoder.push(prev);
        }
        Ok(PyramidFeatures { bottleneck, decoder })
    }

    /// Raw logits from the top decoder feature.
    pub fn output_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, top: Var, n_out: usize) -> Result<Var> {
        let w = store.bind(tape, "head.w")?;
        if tape.shape(w)[0] != n_out {
            return Err(shape_err!(
                "output head has {} channels but {n_out} were requested",
                tape.shape(w)[0]
            ));
        }
        let b = store.bind(tape, "head.b")?;
        tape.conv2d(top, w, Some(b), 1, 1)
    }
}
