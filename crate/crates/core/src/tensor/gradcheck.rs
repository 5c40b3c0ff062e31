//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Which coordinates of each parameter tensor are perturbed.
#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    All,
    /// The `k` coordinates with the largest analytic gradient magnitude in
    /// every tensor.
    LargestPerTensor(usize),
    /// `k` uniformly chosen coordinates per tensor.
    RandomPerTensor { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn probe_indices<T: Real>(probe: &Probe, grad: Option<&Tensor<T>>, numel: usize, salt: u64) -> Vec<usize> {
    match *probe {
        Probe::All => (0..numel).collect(),
        Probe::LargestPerTensor(k) => {
            let mut idx: Vec<usize> = (0..numel).collect();
            if let Some(g) = grad {
                let d = g.data();
                idx.sort_by(|&a, &b| d[b].abs().partial_cmp(&d[a].abs()).unwrap().then(a.cmp(&b)));
            }
            idx.truncate(k.min(numel));
            idx
        }
        Probe::RandomPerTensor { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            sample(&mut rng, numel, count.min(numel)).into_vec()
        }
    }
}

/// Compares `analytic[i]` (tape gradients, `None` meaning zero) against
/// central differences `(f(p + eps) - f(p - eps)) / (2 eps)` of `f` at the
/// probed coordinates and returns the worst relative error, with denominator
/// `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &[(String, Tensor<T>)],
    analytic: &[Option<Tensor<T>>],
    eps: f64,
    probe: &Probe,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[(String, Tensor<T>)]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step must be positive, got {eps}")));
    }
    if analytic.len() != params.len() {
        return Err(shape_err!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let grad = analytic[pi].as_ref();
        if let Some(g) = grad {
            if g.shape() != tensor.shape() {
                return Err(shape_err!("gradient shape mismatch for {name}"));
            }
        }
        for j in probe_indices(probe, grad, tensor.numel(), pi as u64) {
            let orig = tensor.data()[j];
            work[pi].1.data_mut()[j] = T::lit(orig.as_f64() + eps);
            let plus = f(&work)?;
            work[pi].1.data_mut()[j] = T::lit(orig.as_f64() - eps);
            let minus = f(&work)?;
            work[pi].1.data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite_diff_check"));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[j].as_f64());
            let err = relative_error(a, numeric);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
