//! Named parameter tensors and their gradient buffers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::ShopError;
use crate::scalar::Scalar;

pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn matrix(name: &'static str, rows: usize, cols: usize) -> Self {
        TensorSpec { name, rows, cols }
    }

    pub fn vector(name: &'static str, len: usize) -> Self {
        TensorSpec { name, rows: len, cols: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// All weights, stored as flat row-major tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Scalar> {
    specs: Vec<TensorSpec>,
    data: Vec<Vec<S>>,
}

impl<S: Scalar> ParamSet<S> {
    /// Uniform(-0.08, 0.08) initialization, seeded. Draws are made in `f64`
    /// so f32 and f64 instantiations of the same seed agree to rounding.
    pub fn init_uniform(specs: Vec<TensorSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = specs
            .iter()
            .map(|spec| {
                (0..spec.len())
                    .map(|_| S::from_f64_c(rng.gen_range(-INIT_SCALE..INIT_SCALE)))
                    .collect()
            })
            .collect();
        ParamSet { specs, data }
    }

    pub fn zeros(specs: Vec<TensorSpec>) -> Self {
        let data = specs.iter().map(|spec| vec![S::zero(); spec.len()]).collect();
        ParamSet { specs, data }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, id: ParamId) -> &[S] {
        &self.data[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.data[id.0]
    }

    pub fn spec(&self, id: ParamId) -> TensorSpec {
        self.specs[id.0]
    }

    pub fn n_tensors(&self) -> usize {
        self.specs.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flatten in declaration order, downcast to f32.
    pub fn to_f32_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in &self.data {
            out.extend(t.iter().map(|v| v.to_f64_c() as f32));
        }
        out
    }

    pub fn from_f32_flat(specs: Vec<TensorSpec>, flat: &[f32]) -> Result<Self, ShopError> {
        let expected: usize = specs.iter().map(|s| s.len()).sum();
        if flat.len() != expected {
            return Err(ShopError::Format(format!(
                "parameter count mismatch: file has {}, architecture needs {expected}",
                flat.len()
            )));
        }
        let mut data = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in &specs {
            data.push(
                flat[offset..offset + spec.len()]
                    .iter()
                    .map(|v| S::from_f64_c(*v as f64))
                    .collect(),
            );
            offset += spec.len();
        }
        Ok(ParamSet { specs, data })
    }

    /// Apply `f(param, index_within_tensor)` to every coordinate; used by the
    /// finite-difference tests to perturb single coordinates.
    pub fn coordinate_mut(&mut self, tensor: usize, index: usize) -> &mut S {
        &mut self.data[tensor][index]
    }
}

/// One gradient buffer per parameter tensor, same shapes.
#[derive(Debug, Clone)]
pub struct GradStore<S: Scalar> {
    data: Vec<Vec<S>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        GradStore {
            data: params.specs.iter().map(|s| vec![S::zero(); s.len()]).collect(),
        }
    }

    pub fn tensor(&self, id: ParamId) -> &[S] {
        &self.data[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.data[id.0]
    }

    pub fn n_tensors(&self) -> usize {
        self.data.len()
    }

    pub fn zero(&mut self) {
        for t in &mut self.data {
            t.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn add_from(&mut self, other: &GradStore<S>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for t in &mut self.data {
            t.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    pub fn global_norm(&self) -> S {
        let mut sum = S::zero();
        for t in &self.data {
            for v in t {
                sum = sum + *v * *v;
            }
        }
        sum.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Clip the global gradient norm in place; returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradStore<S>, max_norm: S) -> S {
    let norm = grads.global_norm();
    if norm > max_norm && norm > S::zero() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TensorSpec> {
        vec![TensorSpec::matrix("w", 3, 2), TensorSpec::vector("b", 3)]
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a: ParamSet<f64> = ParamSet::init_uniform(specs(), 5);
        let b: ParamSet<f64> = ParamSet::init_uniform(specs(), 5);
        let c: ParamSet<f64> = ParamSet::init_uniform(specs(), 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for id in 0..a.n_tensors() {
            for v in a.tensor(ParamId(id)) {
                assert!(v.abs() < INIT_SCALE);
            }
        }
        assert_eq!(a.parameter_count(), 9);
    }

    #[test]
    fn flat_roundtrip_is_exact_for_f32() {
        let a: ParamSet<f32> = ParamSet::init_uniform(specs(), 9);
        let flat = a.to_f32_flat();
        let b = ParamSet::<f32>::from_f32_flat(specs(), &flat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_reduces_large_norms_only() {
        let params: ParamSet<f64> = ParamSet::zeros(specs());
        let mut g = GradStore::zeros_like(&params);
        g.tensor_mut(ParamId(0)).iter_mut().for_each(|v| *v = 3.0);
        let norm = clip_global_norm(&mut g, 0.5);
        assert!((norm - (9.0 * 6.0f64).sqrt()).abs() < 1e-12);
        assert!((g.global_norm() - 0.5).abs() < 1e-12);

        let mut g2 = GradStore::zeros_like(&params);
        g2.tensor_mut(ParamId(1))[0] = 0.1;
        clip_global_norm(&mut g2, 0.5);
        assert_eq!(g2.tensor(ParamId(1))[0], 0.1);
    }
}
