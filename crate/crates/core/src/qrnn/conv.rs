//! Timestep convolutions, lowered to one matrix product through an
//! unfolded (im2col) view of the input.

use super::Masking;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

impl Masking {
    /// Zero rows padded before the first timestep for filter width `k`.
    /// Masked convolutions pad `k - 1` on the left; unmasked ones split the
    /// padding `⌈(k-1)/2⌉` left and `⌊(k-1)/2⌋` right.
    pub fn left_pad(self, k: usize) -> usize {
        match self {
            Masking::Masked => k - 1,
            Masking::Unmasked => k / 2,
        }
    }
}

/// Unfolds `x` (`[B, T, n]`) into `[B·T, k·n]`, where row `(b, t)` holds
/// inputs `t - pad .. t - pad + k` back to back. Positions before the
/// sequence read from `history` (`[B, k-1, n]`, oldest first) when given,
/// otherwise zero; positions after it are zero.
pub(crate) fn unfold<T: Scalar>(
    x: &[T],
    (batch, steps, n): (usize, usize, usize),
    k: usize,
    pad: usize,
    history: Option<&[T]>,
) -> Vec<T> {
    let width = k * n;
    let mut cols = vec![T::zero(); batch * steps * width];
    for b in 0..batch {
        for t in 0..steps {
            let row = &mut cols[(b * steps + t) * width..(b * steps + t + 1) * width];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                let dst = &mut row[j * n..(j + 1) * n];
                if src >= 0 && (src as usize) < steps {
                    let s = (b * steps + src as usize) * n;
                    dst.copy_from_slice(&x[s..s + n]);
                } else if src < 0 {
                    if let Some(hist) = history {
                        let back = (-src) as usize;
                        if back < k {
                            let s = (b * (k - 1) + (k - 1 - back)) * n;
                            dst.copy_from_slice(&hist[s..s + n]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`unfold`] (history positions receive no gradient).
pub(crate) fn fold<T: Scalar>(
    dcols: &[T],
    (batch, steps, n): (usize, usize, usize),
    k: usize,
    pad: usize,
) -> Vec<T> {
    let width = k * n;
    let mut dx = vec![T::zero(); batch * steps * n];
    for b in 0..batch {
        for t in 0..steps {
            let row = &dcols[(b * steps + t) * width..(b * steps + t + 1) * width];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < steps {
                    let d = (b * steps + src as usize) * n;
                    for (acc, &g) in dx[d..d + n].iter_mut().zip(&row[j * n..(j + 1) * n]) {
                        *acc += g;
                    }
                }
            }
        }
    }
    dx
}

/// Adds `bias` (length `width`) to every row of `out`.
pub(crate) fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// One filter bank applied along time: `y_t = b + Σ_j W[j]ᵀ x_{t-pad+j}`.
///
/// `x` is `[T, n]` or `[B, T, n]`, `w` is `[k, n, m]`, `b` is `[m]`. In
/// masked mode the output at `t` depends only on `x_{t-k+1} ..= x_t`.
pub fn masked_conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    masking: Masking,
) -> Result<Tensor<T>> {
    let (batch, steps, n) = x.dims3()?;
    let &[k, wn, m] = w.shape() else {
        return Err(dim_err!("filter bank must be [k, n, m], got {:?}", w.shape()));
    };
    if wn != n {
        return Err(dim_err!("input has {} channels but filter bank {:?} expects {}", n, w.shape(), wn));
    }
    if b.shape() != [m] {
        return Err(dim_err!("bias {:?} does not match {} filters", b.shape(), m));
    }
    let cols = unfold(x.data(), (batch, steps, n), k, masking.left_pad(k), None);
    let mut out = vec![T::zero(); batch * steps * m];
    gemm(batch * steps, k * n, m, &cols, false, w.data(), false, &mut out, false);
    add_bias(&mut out, b.data());
    let shape = if x.rank() == 2 { vec![steps, m] } else { vec![batch, steps, m] };
    Tensor::new(&shape, out)
}
