//! Standard depth accuracy metrics over valid pixels.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "delta1,delta2,delta3,rel,rms,log10";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.delta1, self.delta2, self.delta3, self.rel, self.rms, self.log10
        )
    }

    /// Unweighted mean of several reports.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Invalid("mean of no metric reports".into()));
        }
        let n = reports.len() as f64;
        let mut m = MetricsReport::default();
        for r in reports {
            m.delta1 += r.delta1;
            m.delta2 += r.delta2;
            m.delta3 += r.delta3;
            m.rel += r.rel;
            m.rms += r.rms;
            m.log10 += r.log10;
        }
        m.delta1 /= n;
        m.delta2 /= n;
        m.delta3 /= n;
        m.rel /= n;
        m.rms /= n;
        m.log10 /= n;
        Ok(m)
    }
}

/// Metrics of `pred` against `gt` on pixels where `mask` holds.
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(shape_err!(
            "metrics: {} predictions, {} targets, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        ));
    }
    let mut n = 0usize;
    let mut d = [0usize; 3];
    let (mut rel, mut sq, mut lg) = (0.0, 0.0, 0.0);
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, m)| **m) {
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Invalid(format!("non-positive depth under mask: pred {p}, gt {g}")));
        }
        n += 1;
        let ratio = (p / g).max(g / p);
        for (i, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                d[i] += 1;
            }
        }
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        lg += (p.log10() - g.log10()).abs();
    }
    if n == 0 {
        return Err(Error::Invalid("metrics with an empty mask".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        delta1: d[0] as f64 / nf,
        delta2: d[1] as f64 / nf,
        delta3: d[2] as f64 / nf,
        rel: rel / nf,
        rms: (sq / nf).sqrt(),
        log10: lg / nf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = [1.0, 2.5, 7.0];
        let r = compute_metrics(&gt, &gt, &[true; 3]).unwrap();
        assert_eq!(r, MetricsReport { delta1: 1.0, delta2: 1.0, delta3: 1.0, rel: 0.0, rms: 0.0, log10: 0.0 });
    }

    #[test]
    fn scaled_prediction() {
        let gt = [1.0, 2.0, 4.0];
        let pred: Vec<f64> = gt.iter().map(|g| g * 1.3).collect();
        let r = compute_metrics(&pred, &gt, &[true; 3]).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 1.0, 1.0));
        assert!((r.rel - 0.3).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case() {
        let r = compute_metrics(&[1.0, 2.0, 4.0], &[1.0, 1.0, 5.0], &[true; 3]).unwrap();
        assert!((r.delta1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.rel - 0.4).abs() < 1e-12);
        assert!((r.rms - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.rms - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[1.0], &[1.0], &[false]).is_err());
        assert!(compute_metrics(&[0.0], &[1.0], &[true]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0], &[true]).is_err());
    }

    proptest! {
        #[test]
        fn delta_chain_and_mask_respect(
            vals in prop::collection::vec((0.01f64..20.0, 0.01f64..20.0, any::<bool>(), 0.01f64..20.0), 1..40)
        ) {
            let pred: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let gt: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let mut mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
            mask[0] = true;
            let r = compute_metrics(&pred, &gt, &mask).unwrap();
            prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
            let altered: Vec<f64> = vals.iter().zip(&mask).map(|(v, m)| if *m { v.0 } else { v.3 }).collect();
            prop_assert_eq!(compute_metrics(&altered, &gt, &mask).unwrap(), r);
        }
    }
}
