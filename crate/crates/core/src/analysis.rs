//! Locality and density summaries of predicted per-pixel bins.

use crate::error::{Error, Result};
use crate::model::DepthRange;

pub const DENSITY_POINTS: usize = 256;

/// Mean distance from each ground-truth depth in a window to its nearest bin
/// center, one value per window.
pub fn nearest_center_locality(centers: &[f64], windows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(Error::Invalid("locality with no bin centers".into()));
    }
    let mut sorted = centers.to_vec();
    sorted.sort_by(f64::total_cmp);
    windows
        .iter()
        .map(|win| {
            if win.is_empty() {
                return Err(Error::Invalid("locality window with no depths".into()));
            }
            let total: f64 = win.iter().map(|&d| nearest_distance(&sorted, d)).sum();
            Ok(total / win.len() as f64)
        })
        .collect()
}

fn nearest_distance(sorted: &[f64], d: f64) -> f64 {
    let i = sorted.partition_point(|&c| c < d);
    let mut best = f64::INFINITY;
    if i < sorted.len() {
        best = best.min((sorted[i] - d).abs());
    }
    if i > 0 {
        best = best.min((sorted[i - 1] - d).abs());
    }
    best
}

/// Bandwidth `0.1 * span / sqrt(m)` used when none is given.
pub fn default_bandwidth(range: DepthRange, m: usize) -> f64 {
    0.1 * range.span() / (m.max(1) as f64).sqrt()
}

/// Gaussian kernel density of `values` on [`DENSITY_POINTS`] uniform points
/// spanning the depth range. Returns `(depth, density)` pairs.
pub fn bin_density_profile(values: &[f64], range: DepthRange, bandwidth: f64) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Invalid("density of an empty set".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let step = range.span() / (DENSITY_POINTS - 1) as f64;
    Ok((0..DENSITY_POINTS)
        .map(|i| {
            let x = range.d_min + step * i as f64;
            let density: f64 = values
                .iter()
                .map(|v| {
                    let z = (x - v) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum();
            (x, density * norm)
        })
        .collect())
}
