//! Wall-clock comparison of QRNN and LSTM layers.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::LstmLayer;
use crate::models::{embed, project, project_backward, scatter_rows, LanguageModel, LmConfig};
use crate::params::Parameters;
use crate::qrnn::{pool_backward, pool_forward, GateSlices, Pooling, QrnnConfig, QrnnLayer};
use crate::tensor::{Rng, Tensor};
use crate::train::{softmax_nll, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "qrnn-f")]
    QrnnF,
    #[serde(rename = "qrnn-fo")]
    QrnnFo,
    #[serde(rename = "qrnn-ifo")]
    QrnnIfo,
    #[serde(rename = "lstm")]
    Lstm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::QrnnF => "qrnn-f",
            LayerKind::QrnnFo => "qrnn-fo",
            LayerKind::QrnnIfo => "qrnn-ifo",
            LayerKind::Lstm => "lstm",
        }
    }

    fn pooling(self) -> Option<Pooling> {
        match self {
            LayerKind::QrnnF => Some(Pooling::F),
            LayerKind::QrnnFo => Some(Pooling::Fo),
            LayerKind::QrnnIfo => Some(Pooling::Ifo),
            LayerKind::Lstm => None,
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qrnn-f" => Ok(LayerKind::QrnnF),
            "qrnn-fo" => Ok(LayerKind::QrnnFo),
            "qrnn-ifo" => Ok(LayerKind::QrnnIfo),
            "lstm" => Ok(LayerKind::Lstm),
            other => Err(Error::Argument(format!("unknown layer kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Forward only.
    Inference,
    /// Forward and backward.
    Training,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(Mode::Inference),
            "training" => Ok(Mode::Training),
            other => Err(Error::Argument(format!("unknown bench mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub kind: LayerKind,
    pub mode: Mode,
    pub batch: usize,
    pub seqlen: usize,
    pub hidden: usize,
    pub reps: usize,
    pub warmup: usize,
    pub median_seconds: f64,
    /// Timestep·channels per second.
    pub throughput: f64,
}

pub const WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of `f` over `reps` runs after `WARMUP` discarded ones.
fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUP {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Largest element count a single benchmark buffer may need before we
/// refuse with a resource error instead of aborting on allocation.
const MAX_ELEMENTS: usize = 1 << 31;

fn check_sizes(batch: usize, seqlen: usize, hidden: usize, k: usize) -> Result<()> {
    if batch == 0 || seqlen == 0 || hidden == 0 || k == 0 {
        return Err(Error::Argument("benchmark sizes must be positive".into()));
    }
    let need = [batch, seqlen, hidden, k, 4].iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match need {
        Some(n) if n <= MAX_ELEMENTS => Ok(()),
        _ => Err(Error::Resource(format!(
            "benchmark of batch {batch}, seqlen {seqlen}, hidden {hidden}, width {k} needs too much memory"
        ))),
    }
}

fn sanity(kind: LayerKind, h: &Tensor<f32>) -> Result<()> {
    if !h.all_finite() || h.max_abs() == 0.0 {
        return Err(Error::Numeric(format!("{} produced a non-finite or all-zero output", kind.name())));
    }
    Ok(())
}

/// Times one layer of `kind` on `[batch, seqlen, hidden]` input drawn from
/// `seed`, so every kind sees identical data for a given shape.
#[allow(clippy::too_many_arguments)]
pub fn time_layer(
    kind: LayerKind,
    batch: usize,
    seqlen: usize,
    hidden: usize,
    k: usize,
    mode: Mode,
    reps: usize,
    seed: u64,
) -> Result<BenchResult> {
    check_sizes(batch, seqlen, hidden, k)?;
    let reps = reps.max(MIN_REPS);
    let mut data_rng = Rng::new(seed);
    let x = Tensor::<f32>::uniform(&[batch, seqlen, hidden], -1.0, 1.0, &mut data_rng);
    let dh = Tensor::<f32>::full(&[batch, seqlen, hidden], 1.0);
    let mut rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let secs = match kind.pooling() {
        Some(pooling) => {
            let layer = QrnnLayer::<f32>::new(QrnnConfig::new(k, hidden, hidden, pooling), &mut rng)?;
            let (h, _) = layer.forward(&x, &mut rng, false)?;
            sanity(kind, &h)?;
            time_median(reps, || {
                match mode {
                    Mode::Inference => {
                        layer.forward(&x, &mut rng, false)?;
                    }
                    Mode::Training => {
                        let (_, cache) = layer.forward(&x, &mut rng, true)?;
                        layer.backward(&cache.expect("training forward caches"), &dh)?;
                    }
                }
                Ok(())
            })?
        }
        None => {
            let layer = LstmLayer::<f32>::new(hidden, hidden, 1.0, &mut rng)?;
            let (h, _) = layer.forward(&x, None, None)?;
            sanity(kind, &h)?;
            time_median(reps, || {
                let (_, cache) = layer.forward(&x, None, None)?;
                if mode == Mode::Training {
                    layer.backward(&cache, &dh)?;
                }
                Ok(())
            })?
        }
    };
    Ok(BenchResult {
        kind,
        mode,
        batch,
        seqlen,
        hidden,
        reps,
        warmup: WARMUP,
        median_seconds: secs,
        throughput: (batch * seqlen * hidden) as f64 / secs,
    })
}

pub const GRID_BATCHES: [usize; 6] = [8, 16, 32, 64, 128, 256];
pub const GRID_SEQLENS: [usize; 5] = [32, 64, 128, 256, 512];

/// Speedup table `lstm_time / qrnn_time`, rows by batch, columns by seqlen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedGrid {
    pub batches: Vec<usize>,
    pub seqlens: Vec<usize>,
    pub speedup: Vec<Vec<f64>>,
    pub results: Vec<BenchResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub batches: Vec<usize>,
    pub seqlens: Vec<usize>,
    pub hidden: usize,
    pub k: usize,
    pub qrnn: LayerKind,
    pub mode: Mode,
    pub reps: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            batches: GRID_BATCHES.to_vec(),
            seqlens: GRID_SEQLENS.to_vec(),
            hidden: 320,
            k: 2,
            qrnn: LayerKind::QrnnFo,
            mode: Mode::Inference,
            reps: MIN_REPS,
            seed: 0,
        }
    }
}

pub fn speed_grid(spec: &GridSpec) -> Result<SpeedGrid> {
    if spec.qrnn == LayerKind::Lstm {
        return Err(Error::Argument("the grid compares a QRNN kind against the LSTM".into()));
    }
    let mut speedup = Vec::with_capacity(spec.batches.len());
    let mut results = Vec::new();
    for &b in &spec.batches {
        let mut row = Vec::with_capacity(spec.seqlens.len());
        for &t in &spec.seqlens {
            let q = time_layer(spec.qrnn, b, t, spec.hidden, spec.k, spec.mode, spec.reps, spec.seed)?;
            let l = time_layer(LayerKind::Lstm, b, t, spec.hidden, spec.k, spec.mode, spec.reps, spec.seed)?;
            row.push(l.median_seconds / q.median_seconds);
            results.push(q);
            results.push(l);
        }
        speedup.push(row);
    }
    Ok(SpeedGrid { batches: spec.batches.clone(), seqlens: spec.seqlens.clone(), speedup, results })
}

impl SpeedGrid {
    pub fn cell(&self, batch: usize, seqlen: usize) -> Option<f64> {
        let r = self.batches.iter().position(|&b| b == batch)?;
        let c = self.seqlens.iter().position(|&t| t == seqlen)?;
        Some(self.speedup[r][c])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch");
        for t in &self.seqlens {
            write!(s, ",{t}").unwrap();
        }
        s.push('\n');
        for (b, row) in self.batches.iter().zip(&self.speedup) {
            write!(s, "{b}").unwrap();
            for v in row {
                write!(s, ",{v:.3}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.results).expect("bench results serialize")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Median seconds per phase of one language-model training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBreakdown {
    /// Gate convolutions (forward and backward) and the rest of the stack
    /// outside pooling.
    pub conv: f64,
    pub pooling: f64,
    /// Output projection, softmax and loss, forward and backward.
    pub softmax: f64,
    pub optimizer: f64,
    /// A whole step, measured end to end.
    pub total: f64,
}

impl ProfileBreakdown {
    pub fn phase_sum(&self) -> f64 {
        self.conv + self.pooling + self.softmax + self.optimizer
    }
}

/// Profiles a training step of a language model with `config` on random
/// ids. Each phase is timed in isolation on the same inputs; the conv phase
/// is the stack's forward+backward time minus its pooling time.
pub fn profile_breakdown(config: &LmConfig, batch: usize, bptt: usize, reps: usize, seed: u64) -> Result<ProfileBreakdown> {
    check_sizes(batch, bptt, config.stack.hidden_dim.max(config.vocab_size), 1)?;
    let reps = reps.max(MIN_REPS);
    let mut rng = Rng::new(seed);
    let mut model = LanguageModel::<f32>::new(config.clone(), &mut rng)?;
    let v = config.vocab_size;
    let inputs: Vec<usize> = (0..batch * bptt).map(|_| rng.below(v)).collect();
    let targets: Vec<usize> = (0..batch * bptt).map(|_| rng.below(v)).collect();
    let rows = batch * bptt;
    let mut opt = Optimizer::<f32>::new(OptimizerKind::Adam);
    let states = model.initial_states(batch);

    let total = {
        let mut r = rng.fork();
        time_median(reps, || {
            let s = model.step(&inputs, &targets, batch, Some(&states), &mut r, true, true)?;
            opt.step(&mut model, &s.grads.expect("gradients requested"), 0.0)
        })?
    };

    let e = embed(&model.embed, &inputs, batch, bptt)?;
    let (h, cache) = model.stack.forward(&e, Some(&states), &mut rng.fork(), true)?;
    let stack = {
        let mut r = rng.fork();
        time_median(reps, || {
            let e = embed(&model.embed, &inputs, batch, bptt)?;
            let (h, c) = model.stack.forward(&e, Some(&states), &mut r, true)?;
            let (de, _) = model.stack.backward(&c, &Tensor::full(h.shape(), 1e-3))?;
            let mut g = Tensor::<f32>::zeros(model.embed.shape());
            scatter_rows(&mut g, &inputs, de.data());
            Ok(())
        })?
    };

    let m = config.stack.hidden_dim;
    let pooling = time_median(reps, || {
        for (l, layer) in model.stack.layers.iter().enumerate() {
            let lc = cache.layer(l);
            let gates = lc.gates();
            let f = gates.f.data();
            let slices = GateSlices {
                z: gates.z.data(),
                f,
                o: gates.o.as_ref().map(|t| t.data()),
                i: gates.i.as_ref().map(|t| t.data()),
            };
            let mut c = vec![0f32; rows * m];
            let mut hh = vec![0f32; rows * m];
            let c0 = vec![0f32; batch * m];
            pool_forward(layer.config.pooling, (batch, bptt, m), &slices, &c0, &mut c, &mut hh);
            pool_backward(layer.config.pooling, (batch, bptt, m), &slices, &c, &c0, &hh);
        }
        Ok(())
    })?;

    let softmax = time_median(reps, || {
        let logits = Tensor::new(&[rows, v], project(h.data(), rows, &model.out_w, &model.out_b))?;
        let (_, dlogits) = softmax_nll(&logits, &targets, None)?;
        let mut dw = Tensor::zeros(model.out_w.shape());
        let mut db = Tensor::zeros(model.out_b.shape());
        project_backward(h.data(), rows, &model.out_w, dlogits.data(), &mut dw, &mut db);
        Ok(())
    })?;

    let grads = model.zeroed();
    let optimizer = time_median(reps, || opt.step(&mut model, &grads, 0.0))?;

    Ok(ProfileBreakdown { conv: (stack - pooling).max(0.0), pooling, softmax, optimizer, total })
}
