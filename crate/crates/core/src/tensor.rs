//! Dense row-major `f64` arrays.
//!
//! [`Tensor`] is the value type that carries activations, parameters and
//! gradients through the rest of the crate. It is intentionally small: shape
//! bookkeeping, a naive matrix product, elementwise maps, broadcasting binary
//! operations and axis reductions. There is no autodiff; every layer derives
//! its own backward pass.
//!
//! Broadcasting follows the usual trailing-axis alignment: shapes are compared
//! from the last axis backwards, a missing leading axis counts as extent 1, and
//! an extent of 1 stretches to match the other operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Axis reductions supported by [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Population variance (divides by N).
    Variance,
    Max,
}

/// Scalar functions for [`Tensor::map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Square,
    Sqrt,
    Exp,
    Ln,
    Relu6,
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Relu6 => x.clamp(0.0, 6.0),
        }
    }
}

/// Elementwise binary operations for [`Tensor::zip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    AbsDiff,
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::AbsDiff => (a - b).abs(),
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "shape does not match data length",
                &shape,
                &[data.len()],
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("ragged rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of axis `axis`; panics if the axis does not exist.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape changes element count",
                &self.shape,
                shape,
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// `[R,K] x [K,C] -> [R,C]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * c..(i + 1) * c];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * c..(p + 1) * c];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose needs rank 2", &self.shape, &[2]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn map(&self, op: UnaryOp) -> Tensor {
        self.map_fn(|x| op.apply(x))
    }

    pub fn map_fn(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map_fn(|x| x * k)
    }

    /// Elementwise binary op with trailing-axis broadcasting.
    pub fn zip(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let rank = self.rank().max(other.rank());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (sa, sb) = (pad(&self.shape), pad(&other.shape));
        let mut out_shape = Vec::with_capacity(rank);
        for (&a, &b) in sa.iter().zip(&sb) {
            if a == b || b == 1 {
                out_shape.push(a);
            } else if a == 1 {
                out_shape.push(b);
            } else {
                return Err(Error::dim("broadcast", &self.shape, &other.shape));
            }
        }
        let (st_a, st_b, st_o) = (strides(&sa), strides(&sb), strides(&out_shape));
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let (mut ia, mut ib) = (0, 0);
            for ax in 0..rank {
                let coord = (flat / st_o[ax]) % out_shape[ax];
                if sa[ax] != 1 {
                    ia += coord * st_a[ax];
                }
                if sb[ax] != 1 {
                    ib += coord * st_b[ax];
                }
            }
            data.push(op.apply(self.data[ia], other.data[ib]));
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, BinaryOp::Mul)
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&self, axes: &[usize], kind: Reduction) -> Result<Tensor> {
        let mut reduced = vec![false; self.rank()];
        for &a in axes {
            if a >= self.rank() || reduced[a] {
                return Err(Error::Index {
                    index: a,
                    limit: self.rank(),
                });
            }
            reduced[a] = true;
        }
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        if count == 0 {
            return Err(Error::Degenerate(format!(
                "empty reduction over axes {axes:?} of shape {:?}",
                self.shape
            )));
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let target = |flat: usize| {
            let mut o = 0;
            let mut k = 0;
            for ax in 0..self.shape.len() {
                if !reduced[ax] {
                    let coord = (flat / in_strides[ax]) % self.shape[ax];
                    o += coord * out_strides[k];
                    k += 1;
                }
            }
            o
        };

        let n = count as f64;
        let data = match kind {
            Reduction::Sum | Reduction::Mean => {
                let mut acc = vec![0.0; out_len];
                for (i, &x) in self.data.iter().enumerate() {
                    acc[target(i)] += x;
                }
                if kind == Reduction::Mean {
                    acc.iter_mut().for_each(|v| *v /= n);
                }
                acc
            }
            Reduction::Max => {
                let mut acc = vec![f64::NEG_INFINITY; out_len];
                for (i, &x) in self.data.iter().enumerate() {
                    let t = target(i);
                    if x > acc[t] {
                        acc[t] = x;
                    }
                }
                acc
            }
            Reduction::Variance => {
                let mut mean = vec![0.0; out_len];
                for (i, &x) in self.data.iter().enumerate() {
                    mean[target(i)] += x;
                }
                mean.iter_mut().for_each(|v| *v /= n);
                let mut acc = vec![0.0; out_len];
                for (i, &x) in self.data.iter().enumerate() {
                    let t = target(i);
                    let d = x - mean[t];
                    acc[t] += d * d;
                }
                acc.iter_mut().for_each(|v| *v /= n);
                acc
            }
        };
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sub-tensor of leading-axis entries `start..end`.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || start > end || end > self.shape[0] {
            return Err(Error::Index {
                index: end,
                limit: self.shape.first().copied().unwrap_or(0),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gathers leading-axis entries by index (repeats allowed).
    pub fn select_leading(&self, indices: &[usize]) -> Result<Tensor> {
        let lead = self.shape.first().copied().unwrap_or(0);
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(Error::Index {
                    index: i,
                    limit: lead,
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_leading(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(Error::dim("concat_leading", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    /// Repeats the whole tensor `times` along the leading axis:
    /// `[B, ..] -> [times * B, ..]`.
    pub fn tile_leading(&self, times: usize) -> Tensor {
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] *= times;
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Tensor { shape, data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last_axis(&self) -> Tensor {
        let k = self.shape.last().copied().unwrap_or(1).max(1);
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(k) {
            let top = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - top).exp();
                z += *v;
            }
            chunk.iter_mut().for_each(|v| *v /= z);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}
