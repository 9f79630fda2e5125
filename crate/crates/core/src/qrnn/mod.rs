//! Quasi-recurrent layers: gated timestep convolutions followed by
//! channel-wise recurrent pooling.
//!
//! A layer computes candidate vectors `Z = tanh(W_z * X)` and gates
//! `F, O, I = σ(W_{f,o,i} * X)` with one convolution per filter bank (all
//! banks are evaluated as a single fused matrix product), optionally zones
//! out forget-gate entries during training, and then runs one of the
//! pooling recurrences from [`pool`].

mod conv;
mod dump;
mod pool;

use serde::{Deserialize, Serialize};

pub use conv::masked_conv1d;
pub(crate) use conv::{add_bias, fold, unfold};
pub use dump::{dump_hidden_states, write_states_csv, HiddenStateSource};
pub use pool::{f_pool, fo_pool, ifo_pool};
pub(crate) use pool::{pool_backward, pool_forward, GateSlices};

use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::regularization::{apply_zoneout, zoneout_keep_mask};
use crate::tensor::{gemm, sigmoid, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    F,
    Fo,
    Ifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Z,
    F,
    O,
    I,
}

impl Gate {
    pub fn name(self) -> &'static str {
        match self {
            Gate::Z => "z",
            Gate::F => "f",
            Gate::O => "o",
            Gate::I => "i",
        }
    }
}

impl Pooling {
    /// Filter banks the mode needs, in fused-column order.
    pub fn gates(self) -> &'static [Gate] {
        match self {
            Pooling::F => &[Gate::Z, Gate::F],
            Pooling::Fo => &[Gate::Z, Gate::F, Gate::O],
            Pooling::Ifo => &[Gate::Z, Gate::F, Gate::O, Gate::I],
        }
    }

    pub fn gate_count(self) -> usize {
        self.gates().len()
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" => Ok(Pooling::F),
            "fo" => Ok(Pooling::Fo),
            "ifo" => Ok(Pooling::Ifo),
            other => Err(Error::Argument(format!("unknown pooling mode '{other}' (expected f, fo or ifo)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Masking {
    /// Causal: output `t` sees inputs `t-k+1 ..= t` only.
    Masked,
    /// Centered receptive field, for encoders and classifiers.
    Unmasked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrnnConfig {
    pub filter_width: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub pooling: Pooling,
    pub masking: Masking,
    /// Probability of zoning out a forget-gate entry during training.
    pub zoneout: f64,
}

impl QrnnConfig {
    pub fn new(filter_width: usize, input_dim: usize, hidden_dim: usize, pooling: Pooling) -> Self {
        QrnnConfig {
            filter_width,
            input_dim,
            hidden_dim,
            pooling,
            masking: Masking::Masked,
            zoneout: 0.0,
        }
    }

    pub fn masking(mut self, masking: Masking) -> Self {
        self.masking = masking;
        self
    }

    pub fn zoneout(mut self, p: f64) -> Self {
        self.zoneout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_width == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Argument(format!(
                "filter width, input and hidden sizes must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.zoneout) {
            return Err(Error::Argument(format!("zoneout rate {} outside [0, 1)", self.zoneout)));
        }
        Ok(())
    }
}

/// Convolutional filter banks, one `[k, n, m]` weight and `[m]` bias per
/// gate of the pooling mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBanks<T> {
    pooling: Pooling,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Scalar> GateBanks<T> {
    pub fn zeros(pooling: Pooling, k: usize, n: usize, m: usize) -> Self {
        let g = pooling.gate_count();
        GateBanks {
            pooling,
            weights: vec![Tensor::zeros(&[k, n, m]); g],
            biases: vec![Tensor::zeros(&[m]); g],
        }
    }

    /// Weights uniform in `±1/√(k·n)`, biases zero.
    pub fn init(pooling: Pooling, k: usize, n: usize, m: usize, rng: &mut Rng) -> Self {
        let r = 1.0 / ((k * n) as f64).sqrt();
        let mut banks = Self::zeros(pooling, k, n, m);
        for w in &mut banks.weights {
            *w = Tensor::uniform(&[k, n, m], -r, r, rng);
        }
        banks
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn slot(&self, gate: Gate) -> Option<usize> {
        self.pooling.gates().iter().position(|&g| g == gate)
    }

    pub fn weight(&self, gate: Gate) -> Option<&Tensor<T>> {
        self.slot(gate).map(|s| &self.weights[s])
    }

    pub fn weight_mut(&mut self, gate: Gate) -> Option<&mut Tensor<T>> {
        self.slot(gate).map(|s| &mut self.weights[s])
    }

    pub fn bias(&self, gate: Gate) -> Option<&Tensor<T>> {
        self.slot(gate).map(|s| &self.biases[s])
    }

    pub fn bias_mut(&mut self, gate: Gate) -> Option<&mut Tensor<T>> {
        self.slot(gate).map(|s| &mut self.biases[s])
    }

    /// `(k, n, m)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.weights[0].shape();
        (s[0], s[1], s[2])
    }

    /// All banks side by side: a `[k·n, G·m]` matrix and a `[G·m]` bias.
    pub(crate) fn fused(&self) -> (Vec<T>, Vec<T>) {
        let (k, n, m) = self.dims();
        let g = self.weights.len();
        let mut w = Vec::with_capacity(k * n * g * m);
        for r in 0..k * n {
            for bank in &self.weights {
                w.extend_from_slice(&bank.data()[r * m..(r + 1) * m]);
            }
        }
        let b = self.biases.iter().flat_map(|b| b.data().iter().copied()).collect();
        (w, b)
    }

    pub(crate) fn from_fused(pooling: Pooling, (k, n, m): (usize, usize, usize), w: &[T], b: &[T]) -> Self {
        let g = pooling.gate_count();
        let mut banks = Self::zeros(pooling, k, n, m);
        for (gi, bank) in banks.weights.iter_mut().enumerate() {
            let d = bank.data_mut();
            for r in 0..k * n {
                d[r * m..(r + 1) * m].copy_from_slice(&w[(r * g + gi) * m..(r * g + gi + 1) * m]);
            }
        }
        for (gi, bias) in banks.biases.iter_mut().enumerate() {
            bias.data_mut().copy_from_slice(&b[gi * m..(gi + 1) * m]);
        }
        banks
    }
}

impl<T: Scalar> Parameters<T> for GateBanks<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (gate, w) in self.pooling.gates().iter().zip(&self.weights) {
            f(format!("w_{}", gate.name()), w);
        }
        for (gate, b) in self.pooling.gates().iter().zip(&self.biases) {
            f(format!("b_{}", gate.name()), b);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        let gates = self.pooling.gates();
        for (gate, w) in gates.iter().zip(self.weights.iter_mut()) {
            f(format!("w_{}", gate.name()), w);
        }
        for (gate, b) in gates.iter().zip(self.biases.iter_mut()) {
            f(format!("b_{}", gate.name()), b);
        }
    }
}

/// Post-activation gate sequences; `o` is present for fo/ifo and `i` for
/// ifo only.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates<T> {
    pub z: Tensor<T>,
    pub f: Tensor<T>,
    pub o: Option<Tensor<T>>,
    pub i: Option<Tensor<T>>,
}

/// Runs every filter bank over `x` and applies the gate nonlinearities.
pub fn compute_gates<T: Scalar>(x: &Tensor<T>, banks: &GateBanks<T>, config: &QrnnConfig) -> Result<Gates<T>> {
    let pre = preactivations(x, banks, config, None, None)?;
    let (batch, steps, _) = x.dims3()?;
    let acts = activate(&pre, config.pooling, config.hidden_dim);
    Ok(gates_to_tensors(acts, x.rank(), (batch, steps, config.hidden_dim)))
}

fn gates_to_tensors<T: Scalar>(acts: Vec<Vec<T>>, rank: usize, (b, t, m): (usize, usize, usize)) -> Gates<T> {
    let shape = if rank == 2 { vec![t, m] } else { vec![b, t, m] };
    let mut it = acts.into_iter().map(|d| Tensor::new(&shape, d).expect("gate shape"));
    Gates {
        z: it.next().unwrap(),
        f: it.next().unwrap(),
        o: it.next(),
        i: it.next(),
    }
}

struct Preactivations<T> {
    cols: Vec<T>,
    /// `[B·T, G·m]`
    values: Vec<T>,
}

fn preactivations<T: Scalar>(
    x: &Tensor<T>,
    banks: &GateBanks<T>,
    config: &QrnnConfig,
    history: Option<&[T]>,
    supplement: Option<&Tensor<T>>,
) -> Result<Preactivations<T>> {
    let (batch, steps, n) = x.dims3()?;
    let (k, bn, m) = banks.dims();
    if banks.pooling() != config.pooling || k != config.filter_width || m != config.hidden_dim || bn != config.input_dim {
        return Err(dim_err!("filter banks {:?} do not match layer config {:?}", (k, bn, m), config));
    }
    if n != bn {
        return Err(dim_err!("input has {} channels, layer expects {}", n, bn));
    }
    let gm = config.pooling.gate_count() * m;
    if let Some(h) = history {
        if config.masking != Masking::Masked || h.len() != batch * (k - 1) * n {
            return Err(dim_err!("carried convolution history does not fit a masked width-{} layer", k));
        }
    }
    let cols = unfold(x.data(), (batch, steps, n), k, config.masking.left_pad(k), history);
    let (w, b) = banks.fused();
    let mut values = vec![T::zero(); batch * steps * gm];
    gemm(batch * steps, k * n, gm, &cols, false, &w, false, &mut values, false);
    add_bias(&mut values, &b);
    if let Some(s) = supplement {
        if s.shape() != [batch, gm] {
            return Err(dim_err!("supplement {:?} must be [{}, {}]", s.shape(), batch, gm));
        }
        for bi in 0..batch {
            let add = s.row(bi);
            for row in values[bi * steps * gm..(bi + 1) * steps * gm].chunks_exact_mut(gm) {
                for (v, &a) in row.iter_mut().zip(add) {
                    *v += a;
                }
            }
        }
    }
    Ok(Preactivations { cols, values })
}

/// Splits fused pre-activations into per-gate buffers: tanh for `z`,
/// sigmoid for the rest.
fn activate<T: Scalar>(pre: &Preactivations<T>, pooling: Pooling, m: usize) -> Vec<Vec<T>> {
    let g = pooling.gate_count();
    let rows = pre.values.len() / (g * m);
    let mut out: Vec<Vec<T>> = (0..g).map(|_| Vec::with_capacity(rows * m)).collect();
    for row in pre.values.chunks_exact(g * m) {
        out[0].extend(row[..m].iter().map(|v| v.tanh()));
        for (gi, buf) in out.iter_mut().enumerate().skip(1) {
            buf.extend(row[gi * m..(gi + 1) * m].iter().map(|&v| sigmoid(v)));
        }
    }
    out
}

/// Recurrent state carried from one window of a stream into the next:
/// the final pooling state and, for masked layers, the last `k - 1` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub batch: usize,
    /// `[B, m]`
    pub c: Vec<T>,
    /// `[B, k-1, n]`, oldest first.
    pub history: Vec<T>,
}

impl<T: Scalar> LayerState<T> {
    pub fn zeros(batch: usize, config: &QrnnConfig) -> Self {
        LayerState {
            batch,
            c: vec![T::zero(); batch * config.hidden_dim],
            history: vec![T::zero(); batch * (config.filter_width - 1) * config.input_dim],
        }
    }
}

/// Identifies the layer a cache was produced by.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Signature {
    filter_width: usize,
    input_dim: usize,
    hidden_dim: usize,
    pooling: Pooling,
    masking: Masking,
}

impl From<&QrnnConfig> for Signature {
    fn from(c: &QrnnConfig) -> Self {
        Signature {
            filter_width: c.filter_width,
            input_dim: c.input_dim,
            hidden_dim: c.hidden_dim,
            pooling: c.pooling,
            masking: c.masking,
        }
    }
}

/// Everything a forward pass keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    signature: Signature,
    rank: usize,
    dims: (usize, usize),
    cols: Vec<T>,
    z: Vec<T>,
    /// Forget gate before zoneout.
    f_raw: Vec<T>,
    /// Forget gate fed to the pooling (after zoneout).
    f: Vec<T>,
    o: Option<Vec<T>>,
    i: Option<Vec<T>>,
    /// 1 where the gate was kept, 0 where it was zoned out.
    keep: Option<Vec<T>>,
    c0: Vec<T>,
    c: Vec<T>,
    supplemented: bool,
}

impl<T: Scalar> LayerCache<T> {
    fn shape(&self) -> Vec<usize> {
        let (b, t) = self.dims;
        if self.rank == 2 {
            vec![t, self.signature.hidden_dim]
        } else {
            vec![b, t, self.signature.hidden_dim]
        }
    }

    fn tensor(&self, data: &[T]) -> Tensor<T> {
        Tensor::new(&self.shape(), data.to_vec()).expect("cache shape")
    }

    /// Pooling states `c_t` (equal to `h_t` under f-pooling).
    pub fn states(&self) -> Tensor<T> {
        self.tensor(&self.c)
    }

    pub fn gates(&self) -> Gates<T> {
        Gates {
            z: self.tensor(&self.z),
            f: self.tensor(&self.f),
            o: self.o.as_ref().map(|o| self.tensor(o)),
            i: self.i.as_ref().map(|i| self.tensor(i)),
        }
    }

    /// Forget gate before zoneout was applied.
    pub fn raw_forget(&self) -> Tensor<T> {
        self.tensor(&self.f_raw)
    }

    /// Zoneout keep mask (1 = kept, 0 = forced to 1), if zoneout ran.
    pub fn keep_mask(&self) -> Option<Tensor<T>> {
        self.keep.as_ref().map(|k| self.tensor(k))
    }

    pub fn output_gate(&self) -> Option<&[T]> {
        self.o.as_deref()
    }

    pub(crate) fn state_slice(&self) -> &[T] {
        &self.c
    }

    /// State to carry into the next window of the same streams.
    pub fn final_state(&self) -> LayerState<T> {
        let (b, t) = self.dims;
        let m = self.signature.hidden_dim;
        let k = self.signature.filter_width;
        let n = self.signature.input_dim;
        let mut c = Vec::with_capacity(b * m);
        let mut history = Vec::with_capacity(b * (k - 1) * n);
        for bi in 0..b {
            let last = bi * t + t - 1;
            c.extend_from_slice(&self.c[last * m..(last + 1) * m]);
            if self.signature.masking == Masking::Masked {
                // The unfolded row of the last step holds x_{T-k+1} ..= x_T.
                history.extend_from_slice(&self.cols[last * k * n + n..(last + 1) * k * n]);
            }
        }
        LayerState { batch: b, c, history }
    }
}

/// Gradients produced by a layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub dx: Tensor<T>,
    pub banks: GateBanks<T>,
    /// Per-sequence sum over time of the pre-activation gradients,
    /// `[B, G·m]`, when the forward pass was supplemented.
    pub d_supplement: Option<Tensor<T>>,
    /// `[B, m]`
    pub dc0: Vec<T>,
}

/// Optional inputs of [`QrnnLayer::forward_with`].
pub struct ForwardArgs<'a, T> {
    /// Carried state; its history is only honoured by masked layers.
    pub state: Option<&'a LayerState<T>>,
    /// `[B, G·m]` vector added to every timestep's pre-activations.
    pub supplement: Option<&'a Tensor<T>>,
    /// Source of zoneout masks; `None` disables zoneout.
    pub zoneout_rng: Option<&'a mut Rng>,
}

impl<T> Default for ForwardArgs<'_, T> {
    fn default() -> Self {
        ForwardArgs {
            state: None,
            supplement: None,
            zoneout_rng: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QrnnLayer<T> {
    pub config: QrnnConfig,
    pub banks: GateBanks<T>,
}

impl<T: Scalar> QrnnLayer<T> {
    pub fn new(config: QrnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let banks = GateBanks::init(
            config.pooling,
            config.filter_width,
            config.input_dim,
            config.hidden_dim,
            rng,
        );
        Ok(QrnnLayer { config, banks })
    }

    pub fn from_banks(config: QrnnConfig, banks: GateBanks<T>) -> Result<Self> {
        config.validate()?;
        let dims = (config.filter_width, config.input_dim, config.hidden_dim);
        if banks.pooling() != config.pooling || banks.dims() != dims {
            return Err(dim_err!("filter banks {:?} do not match config {:?}", banks.dims(), config));
        }
        Ok(QrnnLayer { config, banks })
    }

    /// Forward pass over `[T, n]` or `[B, T, n]` input. Zoneout is active
    /// only when `training`; the cache is returned only when `training`.
    pub fn forward(&self, x: &Tensor<T>, rng: &mut Rng, training: bool) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
        if !x.all_finite() {
            return Err(Error::Numeric("layer input contains non-finite values".into()));
        }
        let args = ForwardArgs {
            zoneout_rng: if training { Some(rng) } else { None },
            ..Default::default()
        };
        let (h, cache) = self.forward_with(x, args)?;
        Ok((h, training.then_some(cache)))
    }

    pub fn forward_with(&self, x: &Tensor<T>, args: ForwardArgs<'_, T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        let cfg = &self.config;
        let (batch, steps, _) = x.dims3()?;
        let m = cfg.hidden_dim;
        let history = args.state.filter(|_| cfg.masking == Masking::Masked).map(|s| s.history.as_slice());
        let pre = preactivations(x, &self.banks, cfg, history, args.supplement)?;
        let mut acts = activate(&pre, cfg.pooling, m).into_iter();
        let z = acts.next().unwrap();
        let f_raw = acts.next().unwrap();
        let o = acts.next();
        let i = acts.next();

        let (f, keep) = match args.zoneout_rng {
            Some(rng) if cfg.zoneout > 0.0 => {
                let keep = zoneout_keep_mask::<T>(rng, f_raw.len(), cfg.zoneout)?;
                (apply_zoneout(&f_raw, &keep), Some(keep))
            }
            _ => (f_raw.clone(), None),
        };

        let c0 = match args.state {
            Some(s) if s.c.len() == batch * m => s.c.clone(),
            Some(s) => {
                return Err(dim_err!("carried state holds {} values, expected {}", s.c.len(), batch * m));
            }
            None => vec![T::zero(); batch * m],
        };
        let mut c = vec![T::zero(); batch * steps * m];
        let mut h = vec![T::zero(); batch * steps * m];
        let slices = GateSlices {
            z: &z,
            f: &f,
            o: o.as_deref(),
            i: i.as_deref(),
        };
        pool_forward(cfg.pooling, (batch, steps, m), &slices, &c0, &mut c, &mut h);

        let cache = LayerCache {
            signature: cfg.into(),
            rank: x.rank(),
            dims: (batch, steps),
            cols: pre.cols,
            z,
            f_raw,
            f,
            o,
            i,
            keep,
            c0,
            c,
            supplemented: args.supplement.is_some(),
        };
        let out = cache.tensor(&h);
        Ok((out, cache))
    }

    fn check_cache(&self, cache: &LayerCache<T>) -> Result<()> {
        if cache.signature != Signature::from(&self.config) {
            return Err(Error::State(format!(
                "cache from layer {:?} used with layer {:?}",
                cache.signature,
                Signature::from(&self.config)
            )));
        }
        Ok(())
    }

    /// Gradients given `∂L/∂H`.
    pub fn backward(&self, cache: &LayerCache<T>, dh: &Tensor<T>) -> Result<LayerGrads<T>> {
        self.check_cache(cache)?;
        if dh.shape() != cache.shape().as_slice() {
            return Err(dim_err!("output gradient {:?} does not match cache {:?}", dh.shape(), cache.shape()));
        }
        let dh = dh.data();
        match self.config.pooling {
            Pooling::F => self.backward_states(cache, dh, None),
            Pooling::Fo | Pooling::Ifo => {
                let o = cache.o.as_ref().unwrap();
                let dc: Vec<T> = dh.iter().zip(o).map(|(&g, &o)| g * o).collect();
                let d_o: Vec<T> = dh.iter().zip(&cache.c).map(|(&g, &c)| g * c).collect();
                self.backward_states(cache, &dc, Some(&d_o))
            }
        }
    }

    /// Gradients given `∂L/∂C` (excluding the recurrence) and `∂L/∂O`.
    /// Used when something other than `o ⊙ c` consumes the states.
    pub fn backward_states(&self, cache: &LayerCache<T>, dc: &[T], d_o: Option<&[T]>) -> Result<LayerGrads<T>> {
        self.check_cache(cache)?;
        let cfg = &self.config;
        let (batch, steps) = cache.dims;
        let (k, n, m) = (cfg.filter_width, cfg.input_dim, cfg.hidden_dim);
        let g = cfg.pooling.gate_count();
        let gm = g * m;
        let rows = batch * steps;
        if dc.len() != rows * m {
            return Err(dim_err!("state gradient has {} values, expected {}", dc.len(), rows * m));
        }
        if cfg.pooling != Pooling::F && d_o.is_none_or(|d| d.len() != rows * m) {
            return Err(dim_err!("output-gate gradient missing or mis-sized"));
        }

        let slices = GateSlices {
            z: &cache.z,
            f: &cache.f,
            o: cache.o.as_deref(),
            i: cache.i.as_deref(),
        };
        let pg = pool_backward(cfg.pooling, (batch, steps, m), &slices, &cache.c, &cache.c0, dc);

        let mut dpre = vec![T::zero(); rows * gm];
        let one = T::one();
        for r in 0..rows {
            let row = &mut dpre[r * gm..(r + 1) * gm];
            for j in 0..m {
                let e = r * m + j;
                let z = cache.z[e];
                row[j] = pg.dz[e] * (one - z * z);
                let fr = cache.f_raw[e];
                let keep = cache.keep.as_ref().map_or(one, |kp| kp[e]);
                row[m + j] = pg.df[e] * keep * fr * (one - fr);
                if let Some(o) = &cache.o {
                    row[2 * m + j] = d_o.unwrap()[e] * o[e] * (one - o[e]);
                }
                if let Some(i) = &cache.i {
                    row[3 * m + j] = pg.di.as_ref().unwrap()[e] * i[e] * (one - i[e]);
                }
            }
        }

        let (w, _) = self.banks.fused();
        let mut dw = vec![T::zero(); k * n * gm];
        gemm(k * n, rows, gm, &cache.cols, true, &dpre, false, &mut dw, false);
        let mut db = vec![T::zero(); gm];
        for row in dpre.chunks_exact(gm) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dcols = vec![T::zero(); rows * k * n];
        gemm(rows, gm, k * n, &dpre, false, &w, true, &mut dcols, false);
        let dx = fold(&dcols, (batch, steps, n), k, cfg.masking.left_pad(k));
        let dx_shape = if cache.rank == 2 { vec![steps, n] } else { vec![batch, steps, n] };

        let d_supplement = if cache.supplemented {
            let mut ds = vec![T::zero(); batch * gm];
            for b in 0..batch {
                let acc = &mut ds[b * gm..(b + 1) * gm];
                for row in dpre[b * steps * gm..(b + 1) * steps * gm].chunks_exact(gm) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            Some(Tensor::new(&[batch, gm], ds)?)
        } else {
            None
        };

        Ok(LayerGrads {
            dx: Tensor::new(&dx_shape, dx)?,
            banks: GateBanks::from_fused(cfg.pooling, (k, n, m), &dw, &db),
            d_supplement,
            dc0: pg.dc0,
        })
    }
}

impl<T: Scalar> Parameters<T> for QrnnLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.banks.visit(f)
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.banks.visit_mut(f)
    }
}
