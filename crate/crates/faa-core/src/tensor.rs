//! Dense f64 tensors in row-major layout.
//!
//! Shapes are either `[n]` (vector) or `[rows, cols]` (matrix); nothing in
//! the adapter stack needs higher rank. `grad` is populated by the tape
//! after a backward pass and is the only field that ever mutates.

use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "only rank-1 and rank-2 tensors are supported, got shape {shape:?}"
        );
        Tensor { shape, data, requires_grad, grad: None }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel], requires_grad)
    }

    pub fn full(shape: Vec<usize>, value: f64, requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel], requires_grad)
    }

    pub fn scalar(value: f64, requires_grad: bool) -> Self {
        Tensor::new(vec![1], vec![value], requires_grad)
    }

    /// Xavier-uniform init: bound = sqrt(6 / (fan_in + fan_out)). For a
    /// matrix the fans are its two dimensions; for a vector both fans are
    /// its length.
    pub fn xavier_uniform(shape: Vec<usize>, rng: &mut StreamRng, requires_grad: bool) -> Self {
        let (fan_in, fan_out) = match shape.as_slice() {
            [n] => (*n, *n),
            [r, c] => (*c, *r),
            _ => panic!("xavier_uniform: unsupported shape {shape:?}"),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(-bound, bound)).collect();
        Tensor::new(shape, data, requires_grad)
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut StreamRng, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal_scaled(std)).collect();
        Tensor::new(shape, data, requires_grad)
    }

    /// Entries drawn i.i.d. uniform in [lo, hi).
    pub fn uniform(
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        rng: &mut StreamRng,
        requires_grad: bool,
    ) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor::new(shape, data, requires_grad)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view: vectors count as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensor rank checked at construction"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = std::panic::catch_unwind(|| Tensor::new(vec![2, 2], vec![1.0; 3], false));
        assert!(err.is_err());
    }

    #[test]
    fn xavier_bound_matches_fan_sum() {
        let mut rng = StreamRng::new(0, "xavier");
        let t = Tensor::xavier_uniform(vec![8, 24], &mut rng, true);
        let bound = (6.0 / 32.0f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
        // With 192 draws the empirical max should come close to the bound.
        let max = t.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.5 * bound);
    }

    #[test]
    fn dims_treats_vectors_as_rows() {
        assert_eq!(Tensor::zeros(vec![5], false).dims(), (1, 5));
        assert_eq!(Tensor::zeros(vec![3, 4], false).dims(), (3, 4));
    }
}
