use rand::Rng;

use super::params::{kaiming_bound, uniform, ParamStore};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Pointwise MLP with two hidden ReLU layers: `in -> h -> h -> out`.
///
/// Acts on the channel axis, so the same weights apply to `[N, C, H, W]`
/// feature maps and to `[B, C]` pooled vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointwiseMlp {
    pub prefix: String,
    pub dims: [usize; 4],
}

impl PointwiseMlp {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dims: [input, hidden, hidden, output],
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for layer in 0..3 {
            let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
            let bound = if layer < 2 {
                kaiming_bound(fan_in)
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            store.insert(self.weight_name(layer), uniform(rng, &[fan_out, fan_in], bound));
            store.insert(self.bias_name(layer), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..3 {
            let w = store.bind(tape, &self.weight_name(layer))?;
            let b = store.bind(tape, &self.bias_name(layer))?;
            h = tape.linear(h, w, Some(b))?;
            if layer < 2 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Evaluates a pointwise MLP on a tensor without recording gradients.
pub fn pointwise_mlp<T: Real>(mlp: &PointwiseMlp, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = mlp.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_oracle(store: &ParamStore<f64>, mlp: &PointwiseMlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in 0..3 {
            let w = store.get(&mlp.weight_name(layer)).unwrap();
            let b = store.get(&mlp.bias_name(layer)).unwrap();
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = b.data()[r];
                for c in 0..cols {
                    acc += w.data()[r * cols + c] * h[c];
                }
                next[r] = if layer < 2 { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = PointwiseMlp::new("m", 5, 8, 3);
        let mut store = ParamStore::<f64>::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        store.entries_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let x = Tensor::from_fn(&[2, 5, 3, 3], |i| i as f64);
        let y = pointwise_mlp(&mlp, &store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spatial_and_flat_application_agree_with_oracle() {
        let mlp = PointwiseMlp::new("m", 4, 8, 3);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        mlp.init(&mut store, &mut rng);
        let x = Tensor::from_fn(&[1, 4, 2, 3], |_| rng.random_range(-1.0..1.0));
        let spatial = pointwise_mlp(&mlp, &store, &x).unwrap();
        for sp in 0..6 {
            let v = x.channel_vec(0, sp);
            let want = dense_oracle(&store, &mlp, &v);
            let got = spatial.channel_vec(0, sp);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            let flat = Tensor::new(vec![1, 4], v).unwrap();
            let flat_out = pointwise_mlp(&mlp, &store, &flat).unwrap();
            for (g, w) in flat_out.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        let one = Tensor::new(vec![1, 4, 1, 1], x.channel_vec(0, 0)).unwrap();
        let flat = Tensor::new(vec![1, 4], x.channel_vec(0, 0)).unwrap();
        assert_eq!(
            pointwise_mlp(&mlp, &store, &one).unwrap().data(),
            pointwise_mlp(&mlp, &store, &flat).unwrap().data()
        );
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mlp = PointwiseMlp::new("m", 4, 8, 3);
        let mut store = ParamStore::<f64>::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(pointwise_mlp(&mlp, &store, &Tensor::zeros(&[1, 5, 2, 2])).is_err());
    }
}
