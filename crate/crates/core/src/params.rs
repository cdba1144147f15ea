//! Ordered store of named trainable parameters.
//!
//! Insertion order is the canonical declaration order used by the Adam
//! optimizer state and by checkpoint files, so training and serialization
//! stay reproducible.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` already declared"
        );
        let slot = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), slot);
        self.values.push(value);
        slot
    }

    /// Glorot-uniform matrix, the initialization used for every network here.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Array2::zeros((fan_in, fan_out));
        for v in w.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.insert(name, w)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: (usize, usize)) -> usize {
        self.insert(name, Array2::zeros(shape))
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn shape(&self, slot: usize) -> (usize, usize) {
        let v = &self.values[slot];
        (v.nrows(), v.ncols())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        &self.values[self.index[name]]
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self.values[self.index[name]]
    }

    pub fn value_by_slot(&self, slot: usize) -> &Array2<f64> {
        &self.values[slot]
    }

    pub fn value_by_slot_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        &mut self.values[slot]
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Flatten the named subset into one vector (declaration order,
    /// row-major within each parameter).
    pub fn flatten(&self, names: &[String]) -> Vec<f64> {
        let mut out = Vec::new();
        for n in names {
            out.extend(self.value(n).iter().copied());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, names: &[String], flat: &[f64]) {
        let mut at = 0usize;
        for n in names {
            let v = self.value_mut(n);
            for x in v.iter_mut() {
                *x = flat[at];
                at += 1;
            }
        }
        assert_eq!(at, flat.len(), "flat length mismatch");
    }
}
