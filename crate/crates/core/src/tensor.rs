//! Dense n-dimensional array type used as the numeric carrier everywhere in
//! the crate.
//!
//! Layout is row-major (last index fastest) and fixed globally; every module
//! assumes it. All arithmetic runs in `f64`.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values, rank 1 through 5, row-major.
///
/// Tensors are immutable values from the caller's perspective: every op
/// returns a fresh tensor and never mutates its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const MAX_RANK: usize = 5;

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut off = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(brow) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Reverses entry order along one axis, leaving the others untouched.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Index(format!(
                "flip axis {} out of range for rank {}",
                axis,
                self.rank()
            )));
        }
        let ext = self.shape[axis];
        // Split the flat index as (outer, axis, inner).
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for a in 0..ext {
                let src = (o * ext + a) * inner;
                let dst = (o * ext + (ext - 1 - a)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Per-row index of the maximum in a rank-2 tensor. Ties break to the
    /// lowest index.
    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "argmax_last needs a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        if k == 0 {
            return Err(Error::Shape("argmax_last needs at least one column".into()));
        }
        let mut out = Vec::with_capacity(n);
        for row in self.data.chunks_exact(k) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("stack needs at least one tensor".into()))?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(parts.len());
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "stack parts disagree: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// Splits a tensor along its leading axis into per-slice tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let inner_shape: Vec<usize> = self.shape[1..].to_vec();
        let inner: usize = inner_shape.iter().product();
        (0..n)
            .map(|i| Tensor {
                shape: inner_shape.clone(),
                data: self.data[i * inner..(i + 1) * inner].to_vec(),
            })
            .collect()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(())
}

/// Elementwise activation functions used by the network layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply_scalar(v))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y += x * w_row, the inner kernel of vector-matrix products.
pub(crate) fn axpy(y: &mut [f64], x: f64, w_row: &[f64]) {
    debug_assert_eq!(y.len(), w_row.len());
    for (d, &w) in y.iter_mut().zip(w_row) {
        *d += x * w;
    }
}

/// out += x · W for a row vector x [in] and matrix W [in × out].
pub(crate) fn vec_mat_acc(out: &mut [f64], x: &[f64], w: &Tensor) {
    let cols = w.shape()[1];
    debug_assert_eq!(w.shape()[0], x.len());
    debug_assert_eq!(out.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        axpy(out, xi, &w.data()[i * cols..(i + 1) * cols]);
    }
}

/// out += v · Wᵀ for a row vector v [out] and matrix W [in × out].
pub(crate) fn vec_mat_t_acc(out: &mut [f64], v: &[f64], w: &Tensor) {
    let cols = w.shape()[1];
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(out.len(), w.shape()[0]);
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w.data()[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (&vj, &wj) in v.iter().zip(row) {
            acc += vj * wj;
        }
        *o += acc;
    }
}

/// grad += xᵀ · v (outer product accumulate) where grad is [in × out].
pub(crate) fn outer_acc(grad: &mut Tensor, x: &[f64], v: &[f64]) {
    let cols = grad.shape()[1];
    debug_assert_eq!(grad.shape()[0], x.len());
    debug_assert_eq!(v.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        axpy(&mut grad.data_mut()[i * cols..(i + 1) * cols], xi, v);
    }
}
