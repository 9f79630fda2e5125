//! The parameterless recurrent pooling functions and their adjoints.
//!
//! All three modes share one channel-wise recurrence
//! `c_t = f_t ⊙ c_{t-1} + u_t ⊙ z_t`, with `u_t = 1 - f_t` for f- and
//! fo-pooling and `u_t = i_t` for ifo-pooling. Channels never interact, so
//! the inner loop runs over channels (SIMD-friendly) while time stays
//! sequential; the per-element arithmetic is the same expression a scalar
//! loop would evaluate, in the same order.

use rayon::prelude::*;

use super::Pooling;
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Borrowed gate activations for one batch, each laid out `[B, T, m]`.
pub(crate) struct GateSlices<'a, T> {
    pub z: &'a [T],
    pub f: &'a [T],
    pub o: Option<&'a [T]>,
    pub i: Option<&'a [T]>,
}

/// Runs the recurrence, writing states `c` and outputs `h` (`[B, T, m]`).
/// For f-pooling `h` equals `c`.
pub(crate) fn pool_forward<T: Scalar>(
    mode: Pooling,
    (batch, steps, m): (usize, usize, usize),
    g: &GateSlices<'_, T>,
    c0: &[T],
    c: &mut [T],
    h: &mut [T],
) {
    let per = steps * m;
    debug_assert!(c.len() == batch * per && h.len() == batch * per && c0.len() == batch * m);
    c.par_chunks_mut(per)
        .zip(h.par_chunks_mut(per))
        .enumerate()
        .for_each(|(b, (cb, hb))| {
            let base = b * per;
            let init = &c0[b * m..(b + 1) * m];
            for t in 0..steps {
                let off = base + t * m;
                let z = &g.z[off..off + m];
                let f = &g.f[off..off + m];
                let (done, rest) = cb.split_at_mut(t * m);
                let prev: &[T] = if t == 0 { init } else { &done[(t - 1) * m..] };
                let row = &mut rest[..m];
                match mode {
                    Pooling::F | Pooling::Fo => {
                        for j in 0..m {
                            row[j] = f[j] * prev[j] + (T::one() - f[j]) * z[j];
                        }
                    }
                    Pooling::Ifo => {
                        let i = &g.i.expect("ifo pooling needs an input gate")[off..off + m];
                        for j in 0..m {
                            row[j] = f[j] * prev[j] + i[j] * z[j];
                        }
                    }
                }
                let hrow = &mut hb[t * m..(t + 1) * m];
                match mode {
                    Pooling::F => hrow.copy_from_slice(row),
                    Pooling::Fo | Pooling::Ifo => {
                        let o = &g.o.expect("output gate missing")[off..off + m];
                        for j in 0..m {
                            hrow[j] = o[j] * row[j];
                        }
                    }
                }
            }
        });
}

/// Gradients of the pooling inputs.
pub(crate) struct PoolGrads<T> {
    pub dz: Vec<T>,
    pub df: Vec<T>,
    pub di: Option<Vec<T>>,
    pub dc0: Vec<T>,
}

/// Reverse-time adjoint of the recurrence. `dc_direct` is ∂L/∂c_t from
/// everything except the recurrence itself (for fo/ifo that is `dh ⊙ o`);
/// the carried term `f_{t+1} ⊙ dc_{t+1}` is accumulated here.
pub(crate) fn pool_backward<T: Scalar>(
    mode: Pooling,
    (batch, steps, m): (usize, usize, usize),
    g: &GateSlices<'_, T>,
    c: &[T],
    c0: &[T],
    dc_direct: &[T],
) -> PoolGrads<T> {
    let n = batch * steps * m;
    let mut dz = vec![T::zero(); n];
    let mut df = vec![T::zero(); n];
    let mut di = match mode {
        Pooling::Ifo => Some(vec![T::zero(); n]),
        _ => None,
    };
    let mut dc0 = vec![T::zero(); batch * m];
    let mut carry = vec![T::zero(); m];
    for b in 0..batch {
        carry.iter_mut().for_each(|x| *x = T::zero());
        for t in (0..steps).rev() {
            let off = (b * steps + t) * m;
            let prev = if t == 0 {
                &c0[b * m..(b + 1) * m]
            } else {
                &c[off - m..off]
            };
            for j in 0..m {
                let dc = dc_direct[off + j] + carry[j];
                let z = g.z[off + j];
                let f = g.f[off + j];
                match mode {
                    Pooling::F | Pooling::Fo => {
                        dz[off + j] = dc * (T::one() - f);
                        df[off + j] = dc * (prev[j] - z);
                    }
                    Pooling::Ifo => {
                        let i = g.i.unwrap()[off + j];
                        dz[off + j] = dc * i;
                        df[off + j] = dc * prev[j];
                        di.as_mut().unwrap()[off + j] = dc * z;
                    }
                }
                carry[j] = dc * f;
            }
        }
        dc0[b * m..(b + 1) * m].copy_from_slice(&carry);
    }
    PoolGrads { dz, df, di, dc0 }
}

fn initial_state<T: Scalar>(init: Option<&Tensor<T>>, batch: usize, m: usize) -> Result<Vec<T>> {
    match init {
        None => Ok(vec![T::zero(); batch * m]),
        Some(s) if s.shape() == [m] => Ok(s.data().repeat(batch)),
        Some(s) if s.shape() == [batch, m] => Ok(s.data().to_vec()),
        Some(s) => Err(dim_err!(
            "initial state shape {:?} incompatible with batch {} × {} channels",
            s.shape(),
            batch,
            m
        )),
    }
}

fn same_shapes<T: Scalar>(first: &Tensor<T>, rest: &[&Tensor<T>]) -> Result<(usize, usize, usize)> {
    for r in rest {
        first.expect_same_shape(r)?;
    }
    first.dims3()
}

fn run<T: Scalar>(
    mode: Pooling,
    z: &Tensor<T>,
    g: GateSlices<'_, T>,
    dims: (usize, usize, usize),
    init: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c0 = initial_state(init, dims.0, dims.2)?;
    let mut c = Tensor::zeros_like(z);
    let mut h = Tensor::zeros_like(z);
    pool_forward(mode, dims, &g, &c0, c.data_mut(), h.data_mut());
    Ok((c, h))
}

/// f-pooling: `h_t = f_t ⊙ h_{t-1} + (1 - f_t) ⊙ z_t`.
///
/// Accepts `[T, m]` or `[B, T, m]` gates; `h0` is `[m]` (shared) or `[B, m]`
/// and defaults to zero.
pub fn f_pool<T: Scalar>(z: &Tensor<T>, f: &Tensor<T>, h0: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let dims = same_shapes(z, &[f])?;
    let g = GateSlices { z: z.data(), f: f.data(), o: None, i: None };
    Ok(run(Pooling::F, z, g, dims, h0)?.1)
}

/// fo-pooling: f-pooling on the state `c`, then `h_t = o_t ⊙ c_t`.
/// Returns `(C, H)`.
pub fn fo_pool<T: Scalar>(
    z: &Tensor<T>,
    f: &Tensor<T>,
    o: &Tensor<T>,
    c0: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = same_shapes(z, &[f, o])?;
    let g = GateSlices { z: z.data(), f: f.data(), o: Some(o.data()), i: None };
    run(Pooling::Fo, z, g, dims, c0)
}

/// ifo-pooling: `c_t = f_t ⊙ c_{t-1} + i_t ⊙ z_t`, `h_t = o_t ⊙ c_t`.
/// Returns `(C, H)`.
pub fn ifo_pool<T: Scalar>(
    z: &Tensor<T>,
    f: &Tensor<T>,
    o: &Tensor<T>,
    i: &Tensor<T>,
    c0: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = same_shapes(z, &[f, o, i])?;
    let g = GateSlices { z: z.data(), f: f.data(), o: Some(o.data()), i: Some(i.data()) };
    run(Pooling::Ifo, z, g, dims, c0)
}
