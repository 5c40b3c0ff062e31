use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let mut store = Self::new();
        for (n, t) in entries {
            store.insert(n, t);
        }
        store
    }

    /// Binds a parameter on the tape (or returns the existing binding).
    pub fn bind(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }

    /// Replaces every value with the one from `loaded`, requiring the exact
    /// same parameter names and shapes.
    pub fn load(&mut self, loaded: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, t) in loaded {
            let Some(current) = self.get_mut(&name) else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name} does not exist in this model"
                )));
            };
            if current.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} but model expects {:?}",
                    t.shape(),
                    current.shape()
                )));
            }
            *current = t;
            seen.insert(name);
        }
        if let Some(missing) = self.names().find(|n| !seen.contains(*n)) {
            return Err(Error::Checkpoint(format!(
                "parameter {missing} is missing from the checkpoint"
            )));
        }
        Ok(())
    }

    /// Gradients of every parameter bound on `tape`, in store order.
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Option<Tensor<T>>> {
        let bound: HashMap<&str, Var> = tape
            .bound_params()
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .collect();
        self.entries
            .iter()
            .map(|(n, _)| bound.get(n.as_str()).and_then(|v| tape.grad(*v)))
            .collect()
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub(crate) fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Kaiming-uniform bound for ReLU layers.
pub(crate) fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
