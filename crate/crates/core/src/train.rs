//! Optimizers, gradient post-processing, learning-rate schedule, loss and
//! evaluation metrics.
//!
//! Per-step order used by every training loop: loss gradients, then
//! [`l2_apply`], then [`rescale_gradients`], then the optimizer.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::tensor::{log_softmax_rows, Scalar, Tensor};

fn check_pairs<T: Scalar>(params: &[&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(dim_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(dim_err!("parameter {:?} paired with gradient {:?}", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
    check_pairs(params, grads)?;
    let lr = T::of(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RmsPropState<T> {
    pub alpha: f64,
    pub eps: f64,
    sq: Vec<Vec<T>>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(alpha: f64, eps: f64) -> Self {
        RmsPropState { alpha, eps, sq: Vec::new() }
    }
}

impl<T: Scalar> Default for RmsPropState<T> {
    fn default() -> Self {
        Self::new(0.9, 1e-8)
    }
}

fn lazy_state<T: Scalar>(state: &mut Vec<Vec<T>>, params: &[&mut Tensor<T>]) -> Result<()> {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    } else if state.len() != params.len() || state.iter().zip(params).any(|(s, p)| s.len() != p.len()) {
        return Err(dim_err!("optimizer state does not match the parameter list"));
    }
    Ok(())
}

/// `s ← α·s + (1−α)·g²`, `p ← p − lr·g/(√s + ε)`.
pub fn rmsprop_step<T: Scalar>(
    state: &mut RmsPropState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    lr: f64,
) -> Result<()> {
    check_pairs(params, grads)?;
    lazy_state(&mut state.sq, params)?;
    let (a, eps, lr) = (T::of(state.alpha), T::of(state.eps), T::of(lr));
    let one = T::one();
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.sq) {
        for ((p, &g), s) in p.data_mut().iter_mut().zip(g.data()).zip(s.iter_mut()) {
            *s = a * *s + (one - a) * g * g;
            *p -= lr * g / (s.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

/// Bias-corrected Adam with step size `lr`.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    lr: f64,
) -> Result<()> {
    check_pairs(params, grads)?;
    lazy_state(&mut state.m, params)?;
    lazy_state(&mut state.v, params)?;
    state.step += 1;
    let t = state.step;
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (b1, b2, eps, lr) = (T::of(state.beta1), T::of(state.beta2), T::of(state.eps), T::of(lr));
    let one = T::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Argument(format!("unknown optimizer '{other}' (expected sgd, rmsprop or adam)"))),
        }
    }
}

/// An optimizer together with its running state.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd,
    RmsProp(RmsPropState<T>),
    Adam(AdamState<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Rmsprop => Optimizer::RmsProp(RmsPropState::default()),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::default()),
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let mut ps = params.params_mut();
        let gs = grads.params();
        match self {
            Optimizer::Sgd => sgd_step(&mut ps, &gs, lr),
            Optimizer::RmsProp(s) => rmsprop_step(s, &mut ps, &gs, lr),
            Optimizer::Adam(s) => adam_step(s, &mut ps, &gs, lr),
        }
    }
}

/// Global L2 norm over every gradient tensor (accumulated in f64).
pub fn global_norm<T: Scalar>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when their global norm
/// exceeds `max_norm`. Returns the norm before rescaling.
pub fn rescale_gradients<T: Scalar>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Argument(format!("maximum gradient norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    Ok(norm)
}

/// `g ← g + coeff·p`.
pub fn l2_apply<T: Scalar>(grads: &mut [&mut Tensor<T>], params: &[&Tensor<T>], coeff: f64) -> Result<()> {
    if coeff.is_nan() || coeff < 0.0 {
        return Err(Error::Argument(format!("L2 coefficient must be non-negative, got {coeff}")));
    }
    if grads.len() != params.len() {
        return Err(dim_err!("{} gradients but {} parameters", grads.len(), params.len()));
    }
    if coeff == 0.0 {
        return Ok(());
    }
    let c = T::of(coeff);
    for (g, p) in grads.iter_mut().zip(params) {
        if g.shape() != p.shape() {
            return Err(dim_err!("gradient {:?} paired with parameter {:?}", g.shape(), p.shape()));
        }
        for (g, &p) in g.data_mut().iter_mut().zip(p.data()) {
            *g += c * p;
        }
    }
    Ok(())
}

/// L2 then rescaling on a whole model's gradients; returns the
/// pre-rescale norm.
pub fn postprocess_gradients<T: Scalar, P: Parameters<T>>(
    grads: &mut P,
    params: &P,
    l2: f64,
    max_norm: Option<f64>,
) -> Result<f64> {
    let mut gs = grads.params_mut();
    l2_apply(&mut gs, &params.params(), l2)?;
    match max_norm {
        Some(m) => rescale_gradients(&mut gs, m),
        None => Ok(global_norm(&gs.iter().map(|g| &**g).collect::<Vec<_>>())),
    }
}

/// Constant for the first `flat_epochs` epochs (1-based), then multiplied
/// by `decay` once per further epoch.
pub fn lr_schedule(epoch: usize, initial: f64, flat_epochs: usize, decay: f64) -> f64 {
    if epoch <= flat_epochs {
        initial
    } else {
        initial * decay.powi((epoch - flat_epochs) as i32)
    }
}

/// Mean negative log-likelihood of `targets` under the rows of
/// `log_probs` (`[N, V]`, or `[B, T, V]` flattened row-wise), skipping
/// positions whose target is `pad`. Also returns the gradient with
/// respect to the logits that produced `log_probs` through a
/// log-softmax: `(softmax − onehot) / count` on counted rows, zero on
/// skipped ones.
pub fn nll_loss<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize], pad: Option<usize>) -> Result<(f64, Tensor<T>)> {
    let v = log_probs.last_dim();
    let rows = log_probs.len() / v;
    if targets.len() != rows {
        return Err(dim_err!("{} targets for {} prediction rows", targets.len(), rows));
    }
    let mut grad = Tensor::zeros(log_probs.shape());
    let counted: Vec<usize> = (0..rows).filter(|&r| Some(targets[r]) != pad).collect();
    if counted.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = T::of(1.0 / counted.len() as f64);
    let mut total = 0.0;
    for &r in &counted {
        let y = targets[r];
        if y >= v {
            return Err(Error::Argument(format!("target id {y} out of range for {v} classes at row {r}")));
        }
        let lp = &log_probs.data()[r * v..(r + 1) * v];
        total -= lp[y].to_f64().unwrap_or(f64::NAN);
        let g = &mut grad.data_mut()[r * v..(r + 1) * v];
        for (g, &l) in g.iter_mut().zip(lp) {
            *g = l.exp() * inv;
        }
        g[y] -= inv;
    }
    Ok((total / counted.len() as f64, grad))
}

/// Row-wise log-softmax of `logits` followed by [`nll_loss`].
pub fn softmax_nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize], pad: Option<usize>) -> Result<(f64, Tensor<T>)> {
    let mut lp = logits.clone();
    let v = lp.last_dim();
    log_softmax_rows(lp.data_mut(), v);
    nll_loss(&lp, targets, pad)
}

/// `exp(mean_nll)`, with the NLL in nats.
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: geometric mean of clipped n-gram precisions
/// (orders `1..=max_n`) times the brevity penalty.
///
/// Orders for which the hypotheses contain no n-grams at all are left out
/// of the mean. Unsmoothed, any order with zero matches gives 0; the
/// `smoothed` variant adds one to every numerator and denominator.
pub fn corpus_bleu<S: Eq + Hash>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize, smoothed: bool) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Argument("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Argument("BLEU needs max_n ≥ 1".into()));
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                total += c;
                matched += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
        if total == 0 {
            continue;
        }
        let (num, den) = if smoothed { (matched + 1, total + 1) } else { (matched, total) };
        if num == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub flat_epochs: usize,
    pub decay: f64,
    /// `None` disables gradient rescaling.
    pub max_grad_norm: Option<f64>,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt: usize,
    pub zoneout: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1.0,
            flat_epochs: 6,
            decay: 0.95,
            max_grad_norm: Some(10.0),
            l2: 0.0,
            epochs: 10,
            batch_size: 20,
            bptt: 35,
            zoneout: 0.0,
            dropout: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("lr decay must be in (0, 1], got {}", self.decay));
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return bad("maximum gradient norm must be positive".into());
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("L2 coefficient must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.zoneout) || !(0.0..1.0).contains(&self.dropout) {
            return bad("zoneout and dropout rates must lie in [0, 1)".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.bptt == 0 {
            return bad("epochs, batch size and bptt must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr, self.flat_epochs, self.decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Tensor<f64> {
        Tensor::full(&[1], v)
    }

    #[test]
    fn sgd_basics() {
        let mut p = t(1.0);
        sgd_step(&mut [&mut p], &[&t(0.0)], 0.5).unwrap();
        assert_eq!(p.get(&[0]), 1.0);
        sgd_step(&mut [&mut p], &[&t(2.0)], 0.5).unwrap();
        assert_eq!(p.get(&[0]), 0.0);
    }

    #[test]
    fn sgd_quadratic_converges() {
        let mut p = t(3.0);
        for _ in 0..50 {
            let g = p.clone();
            sgd_step(&mut [&mut p], &[&g], 0.5).unwrap();
        }
        assert!(p.get(&[0]).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(sgd_step(&mut [&mut p], &[&t(1.0)], 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn rmsprop_first_step() {
        let mut s = RmsPropState::default();
        let mut p = t(0.0);
        rmsprop_step(&mut s, &mut [&mut p], &[&t(0.0)], 0.001).unwrap();
        assert_eq!(p.get(&[0]), 0.0);
        rmsprop_step(&mut s, &mut [&mut p], &[&t(1.0)], 0.001).unwrap();
        let expect = -0.001 / (0.1f64.sqrt() + 1e-8);
        assert!((p.get(&[0]) - expect).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_step_size_is_scale_free() {
        for g in [1e-3, 1.0, 1e3] {
            let mut s = RmsPropState::default();
            let mut p = t(0.0);
            for _ in 0..200 {
                rmsprop_step(&mut s, &mut [&mut p], &[&t(g)], 0.01).unwrap();
            }
            let before = p.get(&[0]);
            rmsprop_step(&mut s, &mut [&mut p], &[&t(g)], 0.01).unwrap();
            let step = (p.get(&[0]) - before).abs();
            assert!((step - 0.01).abs() < 0.002, "{g}: {step}");
        }
    }

    #[test]
    fn adam_first_step_is_lr() {
        for g in [-3.0, 1e-4, 50.0] {
            let mut s = AdamState::default();
            let mut p = t(1.0);
            adam_step(&mut s, &mut [&mut p], &[&t(g)], 0.001).unwrap();
            assert!(((1.0 - p.get(&[0])).abs() - 0.001).abs() < 1e-6);
        }
        let mut s = AdamState::default();
        let mut p = t(1.0);
        adam_step(&mut s, &mut [&mut p], &[&t(0.0)], 0.001).unwrap();
        assert_eq!(p.get(&[0]), 1.0);
    }

    #[test]
    fn adam_quadratic_converges() {
        let mut s = AdamState::default();
        let mut p = t(1.0);
        for _ in 0..2000 {
            let g = p.clone();
            adam_step(&mut s, &mut [&mut p], &[&g], 0.01).unwrap();
        }
        assert!(p.get(&[0]).abs() < 1e-3, "{}", p.get(&[0]));
    }

    #[test]
    fn rescaling() {
        let mut a = Tensor::new(&[2], vec![12.0, 16.0]).unwrap();
        let norm = rescale_gradients(&mut [&mut a], 10.0).unwrap();
        assert_eq!(norm, 20.0);
        assert!((global_norm(&[&a]) - 10.0).abs() < 1e-6);
        assert_eq!(a.data(), &[6.0, 8.0]);
        let mut b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        rescale_gradients(&mut [&mut b], 10.0).unwrap();
        assert_eq!(b.data(), &[3.0, 4.0]);
        let mut z = Tensor::<f64>::zeros(&[3]);
        rescale_gradients(&mut [&mut z], 10.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2_arithmetic_and_decay() {
        let mut g = t(0.0);
        l2_apply(&mut [&mut g], &[&t(2.0)], 0.5).unwrap();
        assert_eq!(g.get(&[0]), 1.0);
        let mut g = t(0.3);
        l2_apply(&mut [&mut g], &[&t(2.0)], 0.0).unwrap();
        assert_eq!(g.get(&[0]), 0.3);
        let mut p = t(1.0);
        for _ in 0..10 {
            let mut g = t(0.0);
            l2_apply(&mut [&mut g], &[&p], 0.1).unwrap();
            sgd_step(&mut [&mut p], &[&g], 0.5).unwrap();
        }
        assert!((p.get(&[0]) - 0.95f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn schedule() {
        for e in 1..=6 {
            assert_eq!(lr_schedule(e, 1.0, 6, 0.95), 1.0);
        }
        assert!((lr_schedule(7, 1.0, 6, 0.95) - 0.95).abs() < 1e-15);
        let lr72 = lr_schedule(72, 1.0, 6, 0.95);
        assert!((lr72 - (66.0 * 0.95f64.ln()).exp()).abs() < 1e-15);
        assert!((lr72 - 0.0339).abs() < 1e-4);
    }

    #[test]
    fn uniform_nll_is_log_v() {
        let lp = log_softmax_test(&Tensor::<f64>::zeros(&[4, 10]));
        let (loss, _) = nll_loss(&lp, &[1, 2, 3, 9], None).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((perplexity(loss) - 10.0).abs() < 1e-9);
    }

    fn log_softmax_test(x: &Tensor<f64>) -> Tensor<f64> {
        crate::tensor::log_softmax(x)
    }

    #[test]
    fn confident_nll_vanishes() {
        let mut logits = Tensor::<f64>::zeros(&[1, 5]);
        logits.set(&[0, 2], 20.0);
        let (loss, _) = softmax_nll(&logits, &[2], None).unwrap();
        assert!(loss < 1e-6 * 10.0 && loss > 0.0);
    }

    #[test]
    fn pad_rows_are_excluded() {
        let logits = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut crate::Rng::new(0));
        let (all, _) = softmax_nll(&logits, &[1, 2, 3], None).unwrap();
        let (some, g) = softmax_nll(&logits, &[1, 0, 3], Some(0)).unwrap();
        assert_ne!(all, some);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(matches!(softmax_nll(&logits, &[1, 9, 3], None), Err(Error::Argument(_))));
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(78.3f64.ln()) - 78.3).abs() < 1e-9);
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let h = vec![words("a b c d e")];
        assert!((corpus_bleu(&h, &h, 4, false).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(corpus_bleu(&[words("x y z")], &[words("a b c")], 4, false).unwrap(), 0.0);
        let b = corpus_bleu(&[words("the cat sat")], &[words("the cat sat down")], 4, false).unwrap();
        assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!(corpus_bleu::<&str>(&[], &[], 4, false).is_err());
    }

    #[test]
    fn smoothed_bleu_is_positive() {
        let b = corpus_bleu(&[words("a b x y")], &[words("a b c d")], 4, true).unwrap();
        assert!(b > 0.0 && b < 1.0);
        assert_eq!(corpus_bleu(&[words("a b x y")], &[words("a b c d")], 4, false).unwrap(), 0.0);
    }
}
