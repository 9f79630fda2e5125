use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Row blocks handed to worker threads are multiples of this many rows.
const ROW_BLOCK: usize = 64;

/// `C = A·B` (or `C += A·B` when `accumulate`), where `A` is logically
/// `m×k` and `B` is `k×n`. A transposed operand is stored as the row-major
/// transpose of its logical shape. `C` is row-major `m×n`.
///
/// Rows of `C` are split across the current rayon pool; each output element
/// is produced by exactly one thread, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };

    let threads = rayon::current_num_threads();
    let block = m.div_ceil(threads).div_ceil(ROW_BLOCK) * ROW_BLOCK;
    if threads > 1 && m >= 2 * ROW_BLOCK && block < m {
        c[..m * n]
            .par_chunks_mut(block * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let r0 = i * block;
                let rows = chunk.len() / n;
                let a_off = if a_trans { r0 } else { r0 * k };
                // SAFETY: the sub-block lies inside `a`, `b` and `chunk` by the
                // length assertion above; `chunk` is exclusively borrowed.
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        T::one(),
                        a.as_ptr().add(a_off),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            });
    } else {
        // SAFETY: see the length assertion above.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape(), b.shape()) {
        (&[p, q], &[q2, r]) if q == q2 => {
            let mut out = Tensor::zeros(&[p, r]);
            gemm(p, q, r, a.data(), false, b.data(), false, out.data_mut(), false);
            Ok(out)
        }
        (sa, sb) => Err(dim_err!("matmul cannot multiply {:?} by {:?}", sa, sb)),
    }
}

/// Runs `f` inside a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Resource(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
