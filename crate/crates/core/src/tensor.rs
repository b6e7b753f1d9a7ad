//! Dense row-major f64 tensors.
//!
//! A [`Tensor`] is an immutable value: cloning shares the underlying buffer.
//! All differentiable computation goes through [`crate::tape::Tape`]; the
//! methods here are plain value arithmetic for samplers and tests.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

/// Immutable dense tensor, row-major, f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    ///
    /// Panics if `product(shape) != data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(f).collect())
    }

    /// Standard-normal samples drawn in flat order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Self {
        Self::from_vec(&self.shape, self.data.iter().copied().map(f).collect())
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self + c * other`, shapes equal.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Self {
        self.zip(other, |a, b| a + c * b)
    }

    fn zip(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Euclidean norm of the flattened buffer.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Right-aligned broadcast of two shapes: trailing dimensions must be equal
/// or 1. Returns the output shape, or `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides for reading `src_shape` as if broadcast to `out_shape`
/// (stride 0 along broadcast axes).
pub fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(src_shape);
    let pad = out_shape.len() - src_shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i < pad {
            out[i] = 0;
        } else {
            let d = src_shape[i - pad];
            out[i] = if d == 1 { 0 } else { src_strides[i - pad] };
        }
    }
    out
}

/// Sums `grad` (of shape `grad_shape`) down to `target_shape`, undoing a
/// broadcast. Shapes must be broadcast-compatible.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let bstrides = broadcast_strides(target_shape, grad_shape);
    let gstrides = strides_of(grad_shape);
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        let mut tgt = 0usize;
        for d in 0..grad_shape.len() {
            let coord = rem / gstrides[d];
            rem %= gstrides[d];
            tgt += coord * bstrides[d];
        }
        out[tgt] += g;
    }
    out
}
