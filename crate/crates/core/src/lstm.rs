//! A conventional LSTM layer with the same calling conventions as
//! [`QrnnLayer`](crate::qrnn::QrnnLayer), used as the comparison baseline.
//!
//! Gate blocks are fused in the order `i, f, o, g`. The input projection of
//! every timestep is computed up front in one matrix product; the
//! recurrence then costs one fused `[B, m] × [m, 4m]` product per step.

use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::tensor::{gemm, sigmoid, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[n, 4m]`
    pub w: Tensor<T>,
    /// `[m, 4m]`
    pub u: Tensor<T>,
    /// `[4m]`
    pub b: Tensor<T>,
}

impl<T: Scalar> LstmLayer<T> {
    /// Uniform `±1/√m` weights; biases zero except the forget block, which
    /// starts at `forget_bias`.
    pub fn new(input_dim: usize, hidden_dim: usize, forget_bias: f64, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Argument("LSTM sizes must be positive".into()));
        }
        let m = hidden_dim;
        let r = 1.0 / (m as f64).sqrt();
        let w = Tensor::uniform(&[input_dim, 4 * m], -r, r, rng);
        let u = Tensor::uniform(&[m, 4 * m], -r, r, rng);
        let b = Tensor::from_fn(&[4 * m], |j| if (m..2 * m).contains(&j) { T::of(forget_bias) } else { T::zero() });
        Ok(LstmLayer { input_dim, hidden_dim, w, u, b })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmLayer {
            input_dim,
            hidden_dim,
            w: Tensor::zeros(&[input_dim, 4 * hidden_dim]),
            u: Tensor::zeros(&[hidden_dim, 4 * hidden_dim]),
            b: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Runs the layer over `[T, n]` or `[B, T, n]` input. `h0`/`c0` are
    /// `[B, m]` (or `[m]` for unbatched input) and default to zero.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        h0: Option<&Tensor<T>>,
        c0: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, LstmCache<T>)> {
        let (batch, steps, n) = x.dims3()?;
        let m = self.hidden_dim;
        let g4 = 4 * m;
        if n != self.input_dim {
            return Err(dim_err!("input has {} channels, LSTM expects {}", n, self.input_dim));
        }
        let init = |s: Option<&Tensor<T>>, what: &str| -> Result<Vec<T>> {
            match s {
                None => Ok(vec![T::zero(); batch * m]),
                Some(t) if t.len() == batch * m => Ok(t.data().to_vec()),
                Some(t) => Err(dim_err!("{} {:?} does not match batch {} × hidden {}", what, t.shape(), batch, m)),
            }
        };
        let h0 = init(h0, "h0")?;
        let c0 = init(c0, "c0")?;

        let rows = batch * steps;
        let mut pre = vec![T::zero(); rows * g4];
        gemm(rows, n, g4, x.data(), false, self.w.data(), false, &mut pre, false);

        let mut gates = vec![T::zero(); rows * g4];
        let mut c = vec![T::zero(); rows * m];
        let mut h = vec![T::zero(); rows * m];
        let mut hprev = vec![T::zero(); rows * m];
        let mut h_cur = h0;
        let mut c_cur = c0.clone();
        let mut step_pre = vec![T::zero(); batch * g4];
        let bias = self.b.data();
        for t in 0..steps {
            for bi in 0..batch {
                let r = bi * steps + t;
                step_pre[bi * g4..(bi + 1) * g4].copy_from_slice(&pre[r * g4..(r + 1) * g4]);
                hprev[r * m..(r + 1) * m].copy_from_slice(&h_cur[bi * m..(bi + 1) * m]);
            }
            gemm(batch, m, g4, &h_cur, false, self.u.data(), false, &mut step_pre, true);
            for bi in 0..batch {
                let r = bi * steps + t;
                let sp = &step_pre[bi * g4..(bi + 1) * g4];
                let ga = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..g4 {
                    let v = sp[j] + bias[j];
                    ga[j] = if j < 3 * m { sigmoid(v) } else { v.tanh() };
                }
                for j in 0..m {
                    let (i, f, o, g) = (ga[j], ga[m + j], ga[2 * m + j], ga[3 * m + j]);
                    let cn = f * c_cur[bi * m + j] + i * g;
                    let hn = o * cn.tanh();
                    c_cur[bi * m + j] = cn;
                    h_cur[bi * m + j] = hn;
                    c[r * m + j] = cn;
                    h[r * m + j] = hn;
                }
            }
        }
        let shape = if x.rank() == 2 { vec![steps, m] } else { vec![batch, steps, m] };
        let cache = LstmCache {
            dims: (self.input_dim, m),
            batch,
            steps,
            x_shape: x.shape().to_vec(),
            x: x.data().to_vec(),
            hprev,
            gates,
            c0,
            c,
        };
        Ok((Tensor::new(&shape, h)?, cache))
    }

    /// Gradients given `∂L/∂H`, including through the recurrent weights.
    pub fn backward(&self, cache: &LstmCache<T>, dh: &Tensor<T>) -> Result<LstmGrads<T>> {
        let m = self.hidden_dim;
        if cache.dims != (self.input_dim, m) {
            return Err(Error::State(format!(
                "cache from an LSTM with sizes {:?} used with sizes {:?}",
                cache.dims,
                (self.input_dim, m)
            )));
        }
        let (batch, steps, n) = (cache.batch, cache.steps, self.input_dim);
        let rows = batch * steps;
        let g4 = 4 * m;
        if dh.len() != rows * m {
            return Err(dim_err!("output gradient {:?} does not match cache", dh.shape()));
        }
        let dh_out = dh.data();
        let one = T::one();
        let mut dpre = vec![T::zero(); rows * g4];
        let mut dh_next = vec![T::zero(); batch * m];
        let mut dc_next = vec![T::zero(); batch * m];
        let mut step_dpre = vec![T::zero(); batch * g4];
        for t in (0..steps).rev() {
            for bi in 0..batch {
                let r = bi * steps + t;
                let ga = &cache.gates[r * g4..(r + 1) * g4];
                let dp = &mut step_dpre[bi * g4..(bi + 1) * g4];
                for j in 0..m {
                    let e = bi * m + j;
                    let (i, f, o, g) = (ga[j], ga[m + j], ga[2 * m + j], ga[3 * m + j]);
                    let c = cache.c[r * m + j];
                    let cprev = if t == 0 { cache.c0[e] } else { cache.c[(r - 1) * m + j] };
                    let tc = c.tanh();
                    let dht = dh_out[r * m + j] + dh_next[e];
                    let dc = dht * o * (one - tc * tc) + dc_next[e];
                    dp[j] = dc * g * i * (one - i);
                    dp[m + j] = dc * cprev * f * (one - f);
                    dp[2 * m + j] = dht * tc * o * (one - o);
                    dp[3 * m + j] = dc * i * (one - g * g);
                    dc_next[e] = dc * f;
                }
                dpre[r * g4..(r + 1) * g4].copy_from_slice(dp);
            }
            gemm(batch, g4, m, &step_dpre, false, self.u.data(), true, &mut dh_next, false);
        }
        let mut dw = vec![T::zero(); n * g4];
        gemm(n, rows, g4, &cache.x, true, &dpre, false, &mut dw, false);
        let mut du = vec![T::zero(); m * g4];
        gemm(m, rows, g4, &cache.hprev, true, &dpre, false, &mut du, false);
        let mut db = vec![T::zero(); g4];
        for row in dpre.chunks_exact(g4) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut dx = vec![T::zero(); rows * n];
        gemm(rows, g4, n, &dpre, false, self.w.data(), true, &mut dx, false);
        Ok(LstmGrads {
            dx: Tensor::new(&cache.x_shape, dx)?,
            params: LstmLayer {
                input_dim: n,
                hidden_dim: m,
                w: Tensor::new(&[n, g4], dw)?,
                u: Tensor::new(&[m, g4], du)?,
                b: Tensor::new(&[g4], db)?,
            },
            dh0: dh_next,
            dc0: dc_next,
        })
    }
}

impl<T: Scalar> Parameters<T> for LstmLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("w".into(), &self.w);
        f("u".into(), &self.u);
        f("b".into(), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f("w".into(), &mut self.w);
        f("u".into(), &mut self.u);
        f("b".into(), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    dims: (usize, usize),
    batch: usize,
    steps: usize,
    x_shape: Vec<usize>,
    x: Vec<T>,
    /// `h_{t-1}` for every row, `[B·T, m]`.
    hprev: Vec<T>,
    /// Post-activation `i, f, o, g`, `[B·T, 4m]`.
    gates: Vec<T>,
    c0: Vec<T>,
    c: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LstmGrads<T> {
    pub dx: Tensor<T>,
    pub params: LstmLayer<T>,
    pub dh0: Vec<T>,
    pub dc0: Vec<T>,
}
