//! Dense row-major tensors of rank 1 to 3 and the handful of kernels the
//! layers are built from.
//!
//! Rank-3 tensors are laid out `batch × time × channels`, so the rows a
//! convolution reads for one sequence are contiguous in memory.

mod linalg;
mod rng;
mod scalar;

use std::fmt;

pub use linalg::{matmul, with_threads};
pub(crate) use linalg::gemm;
pub use rng::{bernoulli_mask, Rng};
pub use scalar::{DType, Scalar};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(dim_err!("tensor rank must be 1..=3, got shape {:?}", shape));
    }
    if shape.contains(&0) {
        return Err(dim_err!("tensor extents must be positive, got shape {:?}", shape));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics if `shape` is not a valid tensor shape.
    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.uniform(low, high)))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the trailing (channel) axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// Views a rank-2 tensor as a single batch element and a rank-3 tensor
    /// as itself: `(batch, time, channels)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [t, c] => Ok((1, t, c)),
            [b, t, c] => Ok((b, t, c)),
            _ => Err(dim_err!("expected a sequence tensor (rank 2 or 3), got {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {:?} out of bounds for shape {:?}", index, self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64().unwrap())).collect(),
        }
    }

    /// Sums the rows of a matrix view, producing a vector over the last axis.
    pub fn sum_rows(&self) -> Tensor<T> {
        let c = self.last_dim();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }
}

/// Elementwise operations. Binary operands must either match the input's
/// shape or be a rank-1 vector of the channel extent, which is broadcast
/// along every row (time step).
#[derive(Clone, Copy, Debug)]
pub enum ElementwiseOp<'a, T> {
    Tanh,
    Sigmoid,
    Neg,
    AddConst(T),
    Mul(&'a Tensor<T>),
    Add(&'a Tensor<T>),
    Sub(&'a Tensor<T>),
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn map_elementwise<T: Scalar>(x: &Tensor<T>, op: ElementwiseOp<'_, T>) -> Result<Tensor<T>> {
    let binary = |other: &Tensor<T>, f: fn(T, T) -> T| -> Result<Tensor<T>> {
        if other.shape == x.shape {
            return x.zip_map(other, f);
        }
        if other.rank() == 1 && other.len() == x.last_dim() {
            let c = x.last_dim();
            let mut out = x.clone();
            for row in out.data.chunks_exact_mut(c) {
                for (a, &b) in row.iter_mut().zip(&other.data) {
                    *a = f(*a, b);
                }
            }
            return Ok(out);
        }
        Err(dim_err!("cannot combine shapes {:?} and {:?}", x.shape, other.shape))
    };
    match op {
        ElementwiseOp::Tanh => Ok(x.map(|v| v.tanh())),
        ElementwiseOp::Sigmoid => Ok(x.map(sigmoid)),
        ElementwiseOp::Neg => Ok(x.map(|v| -v)),
        ElementwiseOp::AddConst(c) => Ok(x.map(|v| v + c)),
        ElementwiseOp::Mul(o) => binary(o, |a, b| a * b),
        ElementwiseOp::Add(o) => binary(o, |a, b| a + b),
        ElementwiseOp::Sub(o) => binary(o, |a, b| a - b),
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(dim_err!("softmax axis {} out of range for shape {:?}", axis, x.shape));
    }
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let extent = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..extent).fold(T::neg_infinity(), |m, j| m.max(x.data[idx(j)]));
            let mut total = T::zero();
            for j in 0..extent {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                total += e;
            }
            for j in 0..extent {
                out.data[idx(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// In-place log-softmax over each row of a slice laid out `rows × width`.
pub(crate) fn log_softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let w = out.last_dim();
    log_softmax_rows(&mut out.data, w);
    out
}

/// Concatenates sequence tensors `[B, T, c_i]` along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
    let (b, t, _) = first.dims3()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pb, pt, pc) = p.dims3()?;
        if pb != b || pt != t {
            return Err(dim_err!("cannot concatenate {:?} with {:?}", first.shape, p.shape));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(b * t * total);
    for r in 0..b * t {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let shape = if first.rank() == 2 { vec![t, total] } else { vec![b, t, total] };
    Tensor::new(&shape, data)
}

/// Inverse of [`concat_channels`]: splits the channel axis into blocks.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (b, t, c) = x.dims3()?;
    if widths.iter().sum::<usize>() != c {
        return Err(dim_err!("split widths {:?} do not cover {} channels", widths, c));
    }
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(b * t * w)).collect();
    for row in x.data.chunks_exact(c) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let shape = if x.rank() == 2 { vec![t, w] } else { vec![b, t, w] };
            Tensor::new(&shape, d)
        })
        .collect()
}
