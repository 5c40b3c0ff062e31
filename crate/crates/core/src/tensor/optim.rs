use super::Tensor;
use crate::error::{shape_err, Result};
use crate::real::Real;

/// Flat learning rate for the first `flat_fraction` of iterations, then a
/// cosine decay from `base_lr` down to `base_lr / decay_factor` at the last
/// iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub flat_fraction: f64,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 3.57e-4,
            flat_fraction: 0.7,
            decay_factor: 1e4,
        }
    }
}

impl LrSchedule {
    /// First iteration of the cosine phase.
    pub fn decay_start(&self, total_iters: usize) -> usize {
        (total_iters as f64 * self.flat_fraction).round() as usize
    }

    pub fn lr(&self, iter: usize, total_iters: usize) -> f64 {
        let start = self.decay_start(total_iters);
        let last = total_iters.saturating_sub(1);
        if iter <= start || last <= start {
            return self.base_lr;
        }
        let final_lr = self.base_lr / self.decay_factor;
        let progress = ((iter - start) as f64 / (last - start) as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        final_lr + (self.base_lr - final_lr) * cosine
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(schedule: LrSchedule, weight_decay: f64) -> Self {
        Self {
            schedule,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `grads[i]` pairs with `params[i]`; a
    /// `None` gradient is treated as zero.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
        iter: usize,
        total_iters: usize,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!(
                "adamw: {} params but {} grads",
                params.len(),
                grads.len()
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(shape_err!("adamw: parameter set changed between steps"));
        }
        self.step += 1;
        let lr = self.schedule.lr(iter, total_iters);
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (idx, param) in params.iter_mut().enumerate() {
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            if m.len() != param.numel() {
                return Err(shape_err!("adamw: moment shape mismatch for parameter {idx}"));
            }
            if let Some(g) = grads[idx] {
                if g.numel() != param.numel() {
                    return Err(shape_err!("adamw: gradient shape mismatch for parameter {idx}"));
                }
            }
            let g = grads[idx].map(|g| g.data());
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                *p *= decay;
                m[j] = b1t * m[j] + ob1 * gj;
                v[j] = b2t * v[j] + ob2 * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                *p -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        let total = 1000;
        assert_eq!(s.lr(0, total), s.base_lr);
        assert_eq!(s.lr(700, total), s.base_lr);
        assert!(s.lr(total - 1, total) <= s.base_lr / 1e4 * (1.0 + 1e-12));
        let mut prev = f64::INFINITY;
        for it in 700..total {
            let lr = s.lr(it, total);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut opt = AdamW::new(LrSchedule::default(), 0.0);
        for it in 0..5 {
            opt.step(&mut [&mut p], &[Some(&g)], it, 10).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_trajectory_matches_hand_rolled_oracle() {
        // Independent scalar AdamW written directly from the update rule.
        let (lr, wd, b1, b2, eps) = (0.1, 0.1, 0.9, 0.999, 1e-8);
        let grad_of = |x: f64| 2.0 * (x - 3.0);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=5 {
            let g = grad_of(x);
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let schedule = LrSchedule {
            base_lr: lr,
            flat_fraction: 1.0,
            decay_factor: 1.0,
        };
        let mut opt = AdamW::new(schedule, wd);
        let mut p = Tensor::<f64>::scalar(1.0);
        for (it, want) in expected.iter().enumerate() {
            let g = Tensor::scalar(grad_of(p.data()[0]));
            opt.step(&mut [&mut p], &[Some(&g)], it, 100).unwrap();
            assert!((p.data()[0] - want).abs() < 1e-12, "step {it}: {} vs {want}", p.data()[0]);
        }
        assert_eq!(opt.steps_taken(), 5);
    }
}
