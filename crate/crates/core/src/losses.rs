//! Training objectives: scale-invariant log loss, 1D bidirectional Chamfer,
//! the size/level weighted bins loss and the total loss.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::DepthRange;
use crate::real::Real;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma_l: f64,
    pub gamma_b: f64,
    pub si_lambda: f64,
    pub si_alpha: f64,
    pub chamfer_reduction: ChamferReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.02,
            gamma_l: 0.3,
            gamma_b: 0.3,
            si_lambda: 0.85,
            si_alpha: 10.0,
            chamfer_reduction: ChamferReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let gamma_ok = |g: f64| g > 0.0 && g <= 1.0;
        if self.beta < 0.0 || !gamma_ok(self.gamma_l) || !gamma_ok(self.gamma_b) {
            return Err(Error::Config(format!(
                "need beta >= 0 and gammas in (0, 1], got beta={} gamma_l={} gamma_b={}",
                self.beta, self.gamma_l, self.gamma_b
            )));
        }
        Ok(())
    }
}

/// How the two directional terms of a Chamfer distance are reduced over
/// their points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChamferReduction {
    /// Sum over points in both directions.
    #[default]
    Sum,
    /// Each direction averaged over its own point count, so a box term does
    /// not grow with the number of ground-truth pixels.
    Mean,
}

impl ChamferReduction {
    pub fn name(&self) -> &'static str {
        match self {
            ChamferReduction::Sum => "sum",
            ChamferReduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for ChamferReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ChamferReduction::Sum),
            "mean" => Ok(ChamferReduction::Mean),
            _ => Err(Error::Config(format!("unknown chamfer reduction '{s}' (sum or mean)"))),
        }
    }
}

fn nearest_sorted<T: Real>(sorted: &[T], x: T) -> usize {
    let pos = sorted.partition_point(|&y| y < x);
    if pos == 0 {
        return 0;
    }
    if pos == sorted.len() {
        return pos - 1;
    }
    let (lo, hi) = (x - sorted[pos - 1], sorted[pos] - x);
    if lo * lo <= hi * hi {
        pos - 1
    } else {
        pos
    }
}

fn sorted_copy<T: Real>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    s
}

/// Bidirectional squared Chamfer distance between two 1D point sets,
/// `sum_a min_b (a - b)^2 + sum_b min_a (a - b)^2`.
pub fn chamfer_1d<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    chamfer_1d_with_grad(a, b).map(|(v, _)| v)
}

/// Chamfer value and its gradient with respect to `a`.
pub fn chamfer_1d_with_grad<T: Real>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    chamfer_1d_reduced(a, b, ChamferReduction::Sum)
}

/// Chamfer value under `reduction` and its gradient with respect to `a`.
pub fn chamfer_1d_reduced<T: Real>(a: &[T], b: &[T], reduction: ChamferReduction) -> Result<(T, Vec<T>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("chamfer_1d of an empty set".into()));
    }
    let (fa, fb) = match reduction {
        ChamferReduction::Sum => (T::one(), T::one()),
        ChamferReduction::Mean => (T::lit(1.0 / a.len() as f64), T::lit(1.0 / b.len() as f64)),
    };
    let two = T::lit(2.0);
    let sorted_b = sorted_copy(b);
    let mut order_a: Vec<usize> = (0..a.len()).collect();
    order_a.sort_by(|&i, &j| a[i].partial_cmp(&a[j]).expect("finite values"));
    let sorted_a: Vec<T> = order_a.iter().map(|&i| a[i]).collect();

    let mut grad = vec![T::zero(); a.len()];
    let mut fwd = T::zero();
    for (i, &x) in a.iter().enumerate() {
        let y = sorted_b[nearest_sorted(&sorted_b, x)];
        let d = x - y;
        fwd += d * d;
        grad[i] += two * fa * d;
    }
    let mut rev = T::zero();
    for &y in b {
        let j = order_a[nearest_sorted(&sorted_a, y)];
        let d = a[j] - y;
        rev += d * d;
        grad[j] += two * fb * d;
    }
    Ok((fa * fwd + fb * rev, grad))
}

fn silog_stats<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<(T, T, usize)> {
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    let mut count = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        if p <= T::zero() || g <= T::zero() {
            return Err(Error::Invalid("silog needs positive depths under the mask".into()));
        }
        let d = p.ln() - g.ln();
        s1 += d;
        s2 += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("silog with no valid pixels".into()));
    }
    let n = T::lit(count as f64);
    Ok((s1 / n, s2 / n, count))
}

/// `alpha * sqrt(mean(g^2) - lambda * mean(g)^2)` with `g = ln pred - ln gt`
/// over the valid pixels.
pub fn silog_value<T: Real>(pred: &[T], gt: &[T], mask: &[bool], lambda: T, alpha: T) -> Result<T> {
    let (m1, m2, _) = silog_stats(pred, gt, mask)?;
    let var = (m2 - lambda * m1 * m1).max(T::zero());
    Ok(alpha * var.sqrt())
}

pub(crate) fn silog_grad<T: Real>(pred: &[T], gt: &[T], mask: &[bool], lambda: T, alpha: T) -> Vec<T> {
    let mut grad = vec![T::zero(); pred.len()];
    let Ok((m1, m2, count)) = silog_stats(pred, gt, mask) else {
        return grad;
    };
    let var = m2 - lambda * m1 * m1;
    if var <= T::zero() {
        return grad;
    }
    let n = T::lit(count as f64);
    let two = T::lit(2.0);
    let outer = alpha / (two * var.sqrt());
    for (i, ((&p, &g), &m)) in pred.iter().zip(gt).zip(mask).enumerate() {
        if m {
            let d = p.ln() - g.ln();
            grad[i] = outer * (two * d / n - two * lambda * m1 / n) / p;
        }
    }
    grad
}

/// Weight of level `level` (1 = bottleneck, `n_levels` = output) and size
/// class `class` (1 = smallest box): `gamma_l^(n - L) * gamma_b^(k - 1)`.
pub fn foveated_weight(n_levels: usize, level: usize, class: usize, gamma_l: f64, gamma_b: f64) -> f64 {
    debug_assert!(level >= 1 && level <= n_levels && class >= 1);
    gamma_l.powi((n_levels - level) as i32) * gamma_b.powi((class - 1) as i32)
}

/// Full `[level][class]` weight table, both indices starting at 1 in the
/// formula and at 0 in the returned vectors.
pub fn foveated_weights(n_levels: usize, n_classes: usize, gamma_l: f64, gamma_b: f64) -> Vec<Vec<f64>> {
    (1..=n_levels)
        .map(|l| {
            (1..=n_classes)
                .map(|k| foveated_weight(n_levels, l, k, gamma_l, gamma_b))
                .collect()
        })
        .collect()
}

/// Per-level responses for a batch of queries: row `b` of `widths[l]` is the
/// normalized bin-width vector of query `b` at level `l`.
pub struct ResponseBatch<T: Real> {
    pub widths: Vec<Var>,
    pub targets: Arc<Vec<Vec<T>>>,
    /// Zero-based size class of every query row.
    pub class: Vec<usize>,
    /// Zero-based image index (within the batch) of every query row.
    pub image: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinsWeighting {
    Uniform,
    Foveated { gamma_l: f64, gamma_b: f64 },
}

impl BinsWeighting {
    pub fn weight(&self, n_levels: usize, level: usize, class: usize) -> f64 {
        match *self {
            BinsWeighting::Uniform => 1.0,
            BinsWeighting::Foveated { gamma_l, gamma_b } => {
                foveated_weight(n_levels, level + 1, class + 1, gamma_l, gamma_b)
            }
        }
    }
}

/// Weighted bins loss summed over levels and queries and averaged over the
/// `n_images` images that contributed queries. Widths are mapped to centers
/// before matching against the ground-truth depth sets.
pub fn bins_loss<T: Real>(
    tape: &mut Tape<T>,
    responses: &ResponseBatch<T>,
    range: DepthRange,
    weighting: BinsWeighting,
    reduction: ChamferReduction,
    n_images: usize,
) -> Result<Var> {
    if responses.targets.is_empty() {
        return Err(Error::Invalid("bins loss with every query rejected".into()));
    }
    let n_levels = responses.widths.len();
    let per_image = 1.0 / n_images.max(1) as f64;
    let mut total: Option<Var> = None;
    for (level, &w) in responses.widths.iter().enumerate() {
        let centers = tape.bin_centers(w, T::lit(range.d_min), T::lit(range.span()))?;
        let weights = responses
            .class
            .iter()
            .map(|&k| T::lit(weighting.weight(n_levels, level, k) * per_image))
            .collect();
        let term = tape.chamfer_rows(centers, responses.targets.clone(), weights, reduction)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("bins loss with no levels".into()))
}

/// `pixel + beta * bins`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, pixel: Var, bins: Option<Var>, beta: f64) -> Result<Var> {
    match bins {
        Some(b) if beta != 0.0 => {
            let scaled = tape.scale(b, T::lit(beta))?;
            tape.add(pixel, scaled)
        }
        _ => Ok(pixel),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn brute_terms(a: &[f64], b: &[f64]) -> (f64, f64) {
        let fwd: f64 = a
            .iter()
            .map(|x| b.iter().map(|y| (x - y) * (x - y)).fold(f64::INFINITY, f64::min))
            .sum();
        let rev: f64 = b
            .iter()
            .map(|y| a.iter().map(|x| (x - y) * (x - y)).fold(f64::INFINITY, f64::min))
            .sum();
        (fwd, rev)
    }

    fn brute(a: &[f64], b: &[f64]) -> f64 {
        let (fwd, rev) = brute_terms(a, b);
        fwd + rev
    }

    #[test]
    fn chamfer_worked_cases() {
        assert_eq!(chamfer_1d(&[0.0], &[1.0, 3.0]).unwrap(), 11.0);
        assert_eq!(chamfer_1d(&[2.0, 2.0, 5.0], &[5.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(chamfer_1d::<f64>(&[], &[1.0]).is_err());
        assert!(chamfer_1d::<f64>(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_matches_brute_force(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            b in prop::collection::vec(-10.0f64..10.0, 1..50),
        ) {
            let fast = chamfer_1d(&a, &b).unwrap();
            prop_assert!((fast - brute(&a, &b)).abs() <= 1e-12 * (1.0 + fast.abs()));
            prop_assert!(fast >= 0.0);
            prop_assert!((fast - chamfer_1d(&b, &a).unwrap()).abs() <= 1e-12 * (1.0 + fast.abs()));
        }

        #[test]
        fn mean_reduction_matches_brute_force(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            b in prop::collection::vec(-10.0f64..10.0, 1..50),
        ) {
            let (fwd, rev) = brute_terms(&a, &b);
            let oracle = fwd / a.len() as f64 + rev / b.len() as f64;
            let (fast, _) = chamfer_1d_reduced(&a, &b, ChamferReduction::Mean).unwrap();
            prop_assert!((fast - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
        }

        #[test]
        fn silog_nonnegative_for_lambda_at_most_one(
            pairs in prop::collection::vec((0.01f64..10.0, 0.01f64..10.0), 1..40),
            lambda in 0.0f64..=1.0,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mask = vec![true; p.len()];
            prop_assert!(silog_value(&p, &g, &mask, lambda, 10.0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn chamfer_gradient_by_finite_differences() {
        let a: [f64; 3] = [0.3, 1.8, 4.2];
        let b: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 5.5];
        let (_, g) = chamfer_1d_with_grad(&a, &b).unwrap();
        for i in 0..a.len() {
            let mut p = a;
            let mut m = a;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (chamfer_1d(&p, &b).unwrap() - chamfer_1d(&m, &b).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn mean_reduction_gradient_by_finite_differences() {
        let a: [f64; 3] = [0.3, 1.8, 4.2];
        let b: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 5.5];
        let f = |x: &[f64]| chamfer_1d_reduced(x, &b, ChamferReduction::Mean).unwrap().0;
        let (v, g) = chamfer_1d_reduced(&a, &b, ChamferReduction::Mean).unwrap();
        // forward 0.09 + 0.04 + 0.64 over 3, reverse 0.09 + 0.49 + 0.04 + 0.64 + 1.69 over 5
        assert!((v - (0.77 / 3.0 + 2.95 / 5.0)).abs() < 1e-12, "{v}");
        for i in 0..a.len() {
            let mut p = a;
            let mut m = a;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
        assert_eq!("mean".parse::<ChamferReduction>().unwrap(), ChamferReduction::Mean);
        assert!("max".parse::<ChamferReduction>().is_err());
    }

    #[test]
    fn silog_hand_computation() {
        let mask = [true, true];
        assert_eq!(silog_value(&[1.5, 2.0], &[1.5, 2.0], &mask, 0.85, 10.0).unwrap(), 0.0);
        let scaled: f64 = silog_value(&[3.0, 6.0], &[1.0, 2.0], &mask, 1.0, 10.0).unwrap();
        assert!(scaled.abs() < 1e-6);
        let v: f64 = silog_value(&[2.0, 4.0], &[1.0, 1.0], &mask, 0.85, 10.0).unwrap();
        let (g1, g2) = (2f64.ln(), 4f64.ln());
        let mean_sq = (g1 * g1 + g2 * g2) / 2.0;
        let mean = (g1 + g2) / 2.0;
        let oracle = 10.0 * (mean_sq - 0.85 * mean * mean).sqrt();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        assert!((v - 5.3129).abs() < 1e-3, "{v}");
    }

    #[test]
    fn silog_errors() {
        assert!(silog_value(&[1.0], &[1.0], &[false], 0.85, 10.0).is_err());
        assert!(silog_value(&[0.0], &[1.0], &[true], 0.85, 10.0).is_err());
        // masked-out non-positive predictions are fine
        assert!(silog_value(&[0.0, 1.0], &[1.0, 2.0], &[false, true], 0.85, 10.0).is_ok());
    }

    #[test]
    fn silog_gradient_on_tape() {
        let pred = [1.2, 0.7, 3.3, 2.0];
        let gt = Arc::new(vec![1.0, 1.0, 2.5, 2.2]);
        let mask = Arc::new(vec![true, true, false, true]);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[4], &pred).unwrap(), true);
        let l = tape.silog(p, gt.clone(), mask.clone(), 0.85, 10.0).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        for i in 0..4 {
            let mut hi = pred;
            let mut lo = pred;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (silog_value(&hi, &gt, &mask, 0.85, 10.0).unwrap()
                - silog_value(&lo, &gt, &mask, 0.85, 10.0).unwrap())
                / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
        assert_eq!(g.data()[2], 0.0);
    }

    #[test]
    fn foveated_weight_table() {
        assert_eq!(foveated_weight(5, 5, 1, 0.3, 0.3), 1.0);
        // 0.3^4 * 0.3^4 = 0.0081^2
        let w = foveated_weight(5, 1, 5, 0.3, 0.3);
        assert!((w - 6.561e-5).abs() < 1e-17, "{w}");
        let table = foveated_weights(5, 5, 0.3, 0.3);
        assert_eq!(table.len(), 5);
        assert_eq!(table[4][0], 1.0);
        for (l, row) in table.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                // black_box keeps the oracle from being constant-folded with a
                // differently rounded powi
                let (el, ek) = std::hint::black_box((4 - l as i32, k as i32));
                assert_eq!(v, 0.3f64.powi(el) * 0.3f64.powi(ek));
            }
        }
    }

    #[test]
    fn total_loss_is_linear_in_bins() {
        let mut tape = Tape::<f64>::new();
        let pixel = tape.leaf(Tensor::scalar(1.0), true);
        let bins = tape.leaf(Tensor::scalar(50.0), true);
        let total = total_loss(&mut tape, pixel, Some(bins), 0.02).unwrap();
        assert!((tape.value(total).data()[0] - 2.0).abs() < 1e-15);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(bins).unwrap().data(), &[0.02]);
        assert_eq!(tape.grad(pixel).unwrap().data(), &[1.0]);
        let alone = total_loss(&mut tape, pixel, Some(bins), 0.0).unwrap();
        assert_eq!(alone, pixel);
    }
}
