//! Named parameter tensors, initialization, and the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of parameter tensors keyed by a canonical dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Mat<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Mat<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replace every tensor from `(name, value)` pairs; names and shapes must
    /// match the registry exactly.
    pub fn load_named(
        &mut self,
        entries: impl IntoIterator<Item = (String, Mat<S>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, value) in entries {
            let id = self
                .index
                .get(&name)
                .copied()
                .ok_or_else(|| OdmError::config(format!("unexpected parameter {name}")))?;
            if self.values[id].shape() != value.shape() {
                return Err(OdmError::config(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    value.shape(),
                    self.values[id].shape()
                )));
            }
            self.values[id] = value;
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(OdmError::config(format!(
                "missing parameter {}",
                self.names[missing]
            )));
        }
        Ok(())
    }

    /// Add Gaussian noise of standard deviation `std` to every tensor. Used to
    /// move a freshly initialized model away from its exact zero-init gates.
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for value in &mut self.values {
            for x in value.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *x += S::lit(std * z);
            }
        }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<S> {
    grads: Vec<Mat<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|v| Mat::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat<S> {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Mat<S>, weight: S) {
        self.grads[id.0].scaled_add_assign(weight, grad);
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for g in &mut self.grads {
            g.scale_in_place(alpha);
        }
    }

    pub fn global_norm(&self) -> S {
        self.grads.iter().map(Mat::squared_norm).sum::<S>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: S) -> S {
        let norm = self.global_norm();
        if norm > max_norm && norm > S::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// PyTorch-style `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<S: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Mat<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| S::lit(rng.random_range(-bound..bound)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Mat<S>>,
    second: Vec<Mat<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros: Vec<Mat<S>> = store
            .values
            .iter()
            .map(|v| Mat::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::lit(self.beta1);
        let b2 = S::lit(self.beta2);
        let c1 = S::one() / (S::one() - b1.powi(t));
        let c2 = S::one() / (S::one() - b2.powi(t));
        let lr = S::lit(self.lr);
        let eps = S::lit(self.eps);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = grads.grads[i].as_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (j, x) in value.as_mut_slice().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let m_hat = m[j] * c1;
                let v_hat = v[j] * c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_bounds_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Mat::zeros(2, 2));
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(a, &Mat::filled(2, 2, 30.0), 1.0);
        let before = grads.clip_global_norm(1.0);
        assert!((before - 60.0).abs() < 1e-12);
        assert!(grads.global_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Mat::filled(1, 3, 1.0));
        let mut adam = Adam::new(&store, 0.1);
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(a, &Mat::row_vector(vec![1.0, -2.0, 0.0]), 1.0);
        adam.step(&mut store, &grads);
        let v = store.get(a);
        // First bias-corrected step has magnitude lr for nonzero gradients.
        assert!((v.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((v.get(0, 1) - 1.1).abs() < 1e-6);
        assert_eq!(v.get(0, 2), 1.0);
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Mat::zeros(2, 3));
        let err = store.load_named([("w".to_string(), Mat::zeros(3, 2))]);
        assert!(err.is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Mat<f64> = uniform_fan_in(2, 3, 2, &mut rng);
        store.load_named([("w".to_string(), w.clone())]).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()), &w);
    }
}
