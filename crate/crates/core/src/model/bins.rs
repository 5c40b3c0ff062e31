//! Bin embedding, seed widths, coarse-to-fine splitting and hybrid regression.
//!
//! The chain is written once over channel-first values so that it runs
//! unchanged on spatial maps `[N, C, H, W]` and on pooled rows `[B, C]`. The
//! only difference between the two is that the spatial path upsamples the
//! previous level before splitting.

use super::{DepthRange, Model, ParamStore, SplitterKind};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Added to the ReLU output of the seed MLP before normalization.
pub const SEED_EPS: f64 = 1e-3;
/// Added to the ReLU outputs of the linear-norm splitter MLP so that a pixel
/// with both outputs dead still gets a strictly positive split.
pub const SPLIT_INPUT_EPS: f64 = 1e-3;

/// Tape handles for the bin state at one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelVars {
    pub widths: Var,
    pub embedding: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitOutput {
    /// Split widths before the final renormalization.
    pub raw: Var,
    pub widths: Var,
    pub embedding: Var,
}

/// Materialized bin state at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BinState<T: Real = f64> {
    pub widths: Tensor<T>,
    pub embedding: Tensor<T>,
    pub level: usize,
}

impl<T: Real> BinState<T> {
    pub fn from_tape(tape: &Tape<T>, vars: LevelVars, level: usize) -> Self {
        Self {
            widths: tape.value(vars.widths).clone(),
            embedding: tape.value(vars.embedding).clone(),
            level,
        }
    }

    pub fn bins(&self) -> usize {
        self.widths.shape()[1]
    }

    /// Checks positivity, unit sums within `tol` and the bin count for `n_seed`.
    pub fn check(&self, n_seed: usize, tol: f64) -> Result<()> {
        let expected = n_seed << self.level;
        if self.bins() != expected {
            return Err(Error::Invalid(format!(
                "level {} has {} bins, expected {expected}",
                self.level,
                self.bins()
            )));
        }
        let (n, m, s) = self.widths.channel_view()?;
        let w = self.widths.data();
        for b in 0..n {
            for sp in 0..s {
                let mut total = 0.0;
                for k in 0..m {
                    let v = w[(b * m + k) * s + sp].as_f64();
                    if v <= 0.0 {
                        return Err(Error::Invalid(format!("non-positive width {v} at level {}", self.level)));
                    }
                    total += v;
                }
                if (total - 1.0).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "widths sum to {total} at level {}",
                        self.level
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split fraction for one bin given the splitter MLP outputs belonging to it:
/// ignored for `Constant`, one logit for `Sigmoid`, `(x1, x2)` for `LinearNorm`.
pub fn splitter_activation(kind: SplitterKind, outputs: &[f64]) -> Result<f64> {
    match kind {
        SplitterKind::Constant => Ok(0.5),
        SplitterKind::Sigmoid => match outputs {
            [x] => Ok(crate::tensor::sigmoid(*x)),
            _ => Err(shape_err!("sigmoid splitter takes one value, got {}", outputs.len())),
        },
        SplitterKind::LinearNorm { eps } => match outputs {
            [x1, x2] if *x1 >= 0.0 && *x2 >= 0.0 => Ok(x1 / (x1 + x2 + eps)),
            [_, _] => Err(Error::Invalid("linear norm splitter needs nonnegative inputs".into())),
            _ => Err(shape_err!("linear norm splitter takes two values, got {}", outputs.len())),
        },
    }
}

/// `(alpha, 1 - alpha)` on the tape for every bin.
fn split_fractions<T: Real>(
    tape: &mut Tape<T>,
    kind: SplitterKind,
    mlp_out: Option<Var>,
    like: Var,
) -> Result<(Var, Var)> {
    match (kind, mlp_out) {
        (SplitterKind::Constant, _) => {
            let half = Tensor::full(tape.shape(like), T::lit(0.5));
            let a = tape.constant(half.clone());
            let c = tape.constant(half);
            Ok((a, c))
        }
        (SplitterKind::Sigmoid, Some(s)) => {
            let a = tape.sigmoid(s)?;
            let neg = tape.scale(s, -T::one())?;
            let c = tape.sigmoid(neg)?;
            Ok((a, c))
        }
        (SplitterKind::LinearNorm { eps }, Some(s)) => {
            let r = tape.relu(s)?;
            let x = tape.add_scalar(r, T::lit(SPLIT_INPUT_EPS))?;
            let a = tape.linear_norm_split(x, T::lit(eps), false)?;
            let c = tape.linear_norm_split(x, T::lit(eps), true)?;
            Ok((a, c))
        }
        (kind, None) => Err(Error::Invalid(format!("{kind} splitter has no MLP"))),
    }
}

pub(super) fn embed<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    level: usize,
    feat: Var,
) -> Result<Var> {
    model.embed_mlp(level)?.forward(tape, store, feat)
}

pub(super) fn seed<T: Real>(model: &Model, tape: &mut Tape<T>, store: &ParamStore<T>, e0: Var) -> Result<Var> {
    let raw = model.seed_mlp().forward(tape, store, e0)?;
    let pos = tape.relu(raw)?;
    let pos = tape.add_scalar(pos, T::lit(SEED_EPS))?;
    tape.normalize_channel(pos)
}

/// One splitting step from `prev` (level `level - 1`) using the current
/// level's embedding.
pub(super) fn split<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    level: usize,
    prev: LevelVars,
    cur_embedding: Var,
    spatial: bool,
) -> Result<SplitOutput> {
    let mlp = model.splitter_mlp(level)?;
    let (prev_w, prev_e) = if spatial {
        let ps = tape.shape(prev.widths).to_vec();
        let cs = tape.shape(cur_embedding).to_vec();
        if ps.len() != 4 || cs.len() != 4 || cs[2] != 2 * ps[2] || cs[3] != 2 * ps[3] {
            return Err(shape_err!(
                "level {level}: embedding {cs:?} is not twice the resolution of {ps:?}"
            ));
        }
        let w = tape.upsample2x(prev.widths)?;
        let w = tape.normalize_channel(w)?;
        let e = tape.upsample2x(prev.embedding)?;
        (w, e)
    } else {
        (prev.widths, prev.embedding)
    };
    let residual = tape.add(prev_e, cur_embedding)?;
    let mlp_out = match mlp {
        Some(m) => Some(m.forward(tape, store, residual)?),
        None => None,
    };
    let (alpha, complement) = split_fractions(tape, model.config.splitter, mlp_out, prev_w)?;
    let raw = tape.interleave_split(prev_w, alpha, complement)?;
    let widths = tape.normalize_channel(raw)?;
    Ok(SplitOutput {
        raw,
        widths,
        embedding: residual,
    })
}

pub(super) fn run_chain<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feats: &[Var],
    spatial: bool,
) -> Result<Vec<LevelVars>> {
    let e0 = embed(model, tape, store, 0, feats[0])?;
    let w0 = seed(model, tape, store, e0)?;
    let mut levels = vec![LevelVars {
        widths: w0,
        embedding: e0,
    }];
    for (level, &feat) in feats.iter().enumerate().skip(1) {
        let e = embed(model, tape, store, level, feat)?;
        let prev = *levels.last().expect("seed level present");
        let out = split(model, tape, store, level, prev, e, spatial)?;
        levels.push(LevelVars {
            widths: out.widths,
            embedding: out.embedding,
        });
    }
    Ok(levels)
}

pub(super) fn hybrid_regress_vars<T: Real>(
    tape: &mut Tape<T>,
    widths: Var,
    logits: Var,
    range: DepthRange,
) -> Result<Var> {
    if tape.shape(widths) != tape.shape(logits) {
        return Err(shape_err!(
            "widths {:?} and logits {:?} differ",
            tape.shape(widths),
            tape.shape(logits)
        ));
    }
    let centers = tape.bin_centers(widths, T::lit(range.d_min), T::lit(range.span()))?;
    let p = tape.softmax_channel(logits)?;
    let weighted = tape.mul(centers, p)?;
    tape.channel_sum(weighted)
}

fn check_normalized<T: Real>(widths: &Tensor<T>) -> Result<()> {
    let (n, m, s) = widths.channel_view()?;
    let w = widths.data();
    for b in 0..n {
        for sp in 0..s {
            let total: f64 = (0..m).map(|k| w[(b * m + k) * s + sp].as_f64()).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("bin widths sum to {total}, not 1")));
            }
        }
    }
    Ok(())
}

/// Bin centers along the channel axis of normalized widths.
pub fn bin_centers<T: Real>(widths: &Tensor<T>, range: DepthRange) -> Result<Tensor<T>> {
    check_normalized(widths)?;
    let mut tape = Tape::new();
    let w = tape.constant(widths.clone());
    let c = tape.bin_centers(w, T::lit(range.d_min), T::lit(range.span()))?;
    Ok(tape.value(c).clone())
}

/// Softmax-weighted sum of bin centers; output has a single channel.
pub fn hybrid_regress<T: Real>(widths: &Tensor<T>, logits: &Tensor<T>, range: DepthRange) -> Result<Tensor<T>> {
    check_normalized(widths)?;
    let mut tape = Tape::new();
    let w = tape.constant(widths.clone());
    let l = tape.constant(logits.clone());
    let d = hybrid_regress_vars(&mut tape, w, l, range)?;
    Ok(tape.value(d).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n_seed: usize, n: usize, splitter: SplitterKind) -> Model {
        Model::new(ModelConfig {
            n_seed,
            n_decoder: n,
            splitter,
            range: DepthRange::new(1e-3, 10.0).unwrap(),
            head: HeadKind::LocalBins,
        })
        .unwrap()
    }

    #[test]
    fn splitter_activation_values() {
        assert_eq!(splitter_activation(SplitterKind::Constant, &[7.0]).unwrap(), 0.5);
        assert_eq!(splitter_activation(SplitterKind::Sigmoid, &[0.0]).unwrap(), 0.5);
        let ln = SplitterKind::linear_norm();
        assert!((splitter_activation(ln, &[1.0, 1.0]).unwrap() - 1.0 / 2.0001).abs() < 1e-15);
        assert!((splitter_activation(ln, &[3.0, 1.0]).unwrap() - 0.7499812).abs() < 1e-6);
        assert!(splitter_activation(ln, &[-1.0, 1.0]).is_err());
        assert!(splitter_activation(ln, &[1.0]).is_err());
    }

    #[test]
    fn centers_examples() {
        let r = DepthRange { d_min: 0.0, d_max: 10.0 };
        let w = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert_eq!(bin_centers(&w, r).unwrap().data(), &[2.5, 7.5]);
        let r = DepthRange { d_min: 0.0, d_max: 8.0 };
        let w = Tensor::<f64>::from_f64(&[1, 4], &[0.25; 4]).unwrap();
        assert_eq!(bin_centers(&w, r).unwrap().data(), &[1.0, 3.0, 5.0, 7.0]);
        let bad = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.6]).unwrap();
        assert!(bin_centers(&bad, r).is_err());
    }

    #[test]
    fn hybrid_regression_examples() {
        let r = DepthRange { d_min: 0.0, d_max: 8.0 };
        let w = Tensor::<f64>::from_f64(&[1, 4, 1, 1], &[0.25; 4]).unwrap();
        let uniform = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
        assert!((hybrid_regress(&w, &uniform, r).unwrap().data()[0] - 4.0).abs() < 1e-12);
        let one_hot = Tensor::<f64>::from_f64(&[1, 4, 1, 1], &[0.0, 0.0, 800.0, 0.0]).unwrap();
        assert_eq!(hybrid_regress(&w, &one_hot, r).unwrap().data()[0], 5.0);
        assert!(hybrid_regress(&w, &Tensor::zeros(&[1, 3, 1, 1]), r).is_err());
    }

    #[test]
    fn hybrid_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = DepthRange::default();
        let (m, s) = (6, 5);
        let mut w = Tensor::from_fn(&[2, m, 1, s], |_| rng.random_range(0.05..1.0));
        for b in 0..2 {
            for sp in 0..s {
                let total: f64 = (0..m).map(|k| w.data()[(b * m + k) * s + sp]).sum();
                for k in 0..m {
                    w.data_mut()[(b * m + k) * s + sp] /= total;
                }
            }
        }
        let logits = Tensor::from_fn(&[2, m, 1, s], |_| rng.random_range(-3.0..3.0));
        let got = hybrid_regress(&w, &logits, r).unwrap();
        for b in 0..2 {
            for sp in 0..s {
                let wv: Vec<f64> = (0..m).map(|k| w.data()[(b * m + k) * s + sp]).collect();
                let lv: Vec<f64> = (0..m).map(|k| logits.data()[(b * m + k) * s + sp]).collect();
                let mx = lv.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = lv.iter().map(|l| (l - mx).exp()).sum();
                let mut cum = 0.0;
                let mut d = 0.0;
                for k in 0..m {
                    let c = r.d_min + r.span() * (wv[k] / 2.0 + cum);
                    cum += wv[k];
                    d += c * (lv[k] - mx).exp() / z;
                }
                assert!((got.data()[b * s + sp] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_split_is_exact_halving() {
        let m = model(2, 1, SplitterKind::Constant);
        let store = m.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let prev = LevelVars {
            widths: tape.constant(Tensor::<f64>::from_f64(&[1, 2], &[0.4, 0.6]).unwrap()),
            embedding: tape.constant(Tensor::zeros(&[1, 128])),
        };
        let cur = tape.constant(Tensor::zeros(&[1, 128]));
        let out = split(&m, &mut tape, &store, 1, prev, cur, false).unwrap();
        assert_eq!(tape.value(out.raw).data(), &[0.2, 0.2, 0.3, 0.3]);
    }

    #[test]
    fn sigmoid_zero_equals_constant() {
        let sig = model(3, 1, SplitterKind::Sigmoid);
        let mut store = sig.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(1));
        for name in ["split.1.2.w", "split.1.2.b"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let cons = model(3, 1, SplitterKind::Constant);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let prev = LevelVars {
                widths: tape.constant(Tensor::<f64>::from_f64(&[1, 3, 1, 1], &[0.2, 0.5, 0.3]).unwrap()),
                embedding: tape.constant(Tensor::full(&[1, 128, 1, 1], 0.1)),
            };
            let cur = tape.constant(Tensor::full(&[1, 128, 2, 2], -0.2));
            let out = split(m, &mut tape, &store, 1, prev, cur, true).unwrap();
            tape.value(out.widths).clone()
        };
        assert_eq!(run(&sig), run(&cons));
    }

    #[test]
    fn seed_symmetry_and_degenerate() {
        let m = model(4, 0, SplitterKind::Constant);
        let mut store = m.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(2));
        for name in ["seed.2.w", "seed.2.b"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let e0 = tape.constant(Tensor::full(&[1, 128, 2, 2], 0.3));
        let w = seed(&m, &mut tape, &store, e0).unwrap();
        assert!(tape.value(w).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let one = model(1, 0, SplitterKind::Constant);
        let store = one.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let e0 = tape.constant(Tensor::from_fn(&[1, 128, 2, 2], |i| (i as f64).sin()));
        let w = seed(&one, &mut tape, &store, e0).unwrap();
        assert!(tape.value(w).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn split_rejects_wrong_resolution_and_level() {
        let m = model(2, 2, SplitterKind::linear_norm());
        let store = m.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let prev = LevelVars {
            widths: tape.constant(Tensor::full(&[1, 2, 2, 2], 0.5)),
            embedding: tape.constant(Tensor::zeros(&[1, 128, 2, 2])),
        };
        let cur = tape.constant(Tensor::zeros(&[1, 128, 2, 2]));
        assert!(split(&m, &mut tape, &store, 1, prev, cur, true).is_err());
        assert!(split(&m, &mut tape, &store, 3, prev, cur, false).is_err());
        assert!(split(&m, &mut tape, &store, 0, prev, cur, false).is_err());
    }
}
