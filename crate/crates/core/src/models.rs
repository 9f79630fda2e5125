//! Task models built from QRNN stacks, and their training loops.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_lm, bucket_by_length, pad_batch, LmBatch};
use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::qrnn::{HiddenStateSource, LayerState};
use crate::regularization::{QrnnStack, StackConfig};
use crate::seq2seq::Seq2Seq;
use crate::tensor::{gemm, Rng, Scalar, Tensor};
use crate::train::{perplexity, postprocess_gradients, softmax_nll, Optimizer, TrainConfig};

pub(crate) fn embed<T: Scalar>(table: &Tensor<T>, ids: &[usize], batch: usize, steps: usize) -> Result<Tensor<T>> {
    let v = table.shape()[0];
    let e = table.last_dim();
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[batch, steps, e], out)
}

pub(crate) fn scatter_rows<T: Scalar>(grad: &mut Tensor<T>, ids: &[usize], d: &[T]) {
    let e = grad.last_dim();
    for (r, &id) in ids.iter().enumerate() {
        for (g, &v) in grad.row_mut(id).iter_mut().zip(&d[r * e..(r + 1) * e]) {
            *g += v;
        }
    }
}

/// Affine output layer `x·W + b`.
pub(crate) fn project<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (m, v) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); rows * v];
    gemm(rows, m, v, x, false, w.data(), false, &mut out, false);
    crate::qrnn::add_bias(&mut out, b.data());
    out
}

/// Backward of [`project`]: accumulates into `dw`, `db`, returns `dx`.
pub(crate) fn project_backward<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, dy: &[T], dw: &mut Tensor<T>, db: &mut Tensor<T>) -> Vec<T> {
    let (m, v) = (w.shape()[0], w.shape()[1]);
    gemm(m, rows, v, x, true, dy, false, dw.data_mut(), true);
    for row in dy.chunks_exact(v) {
        for (a, &g) in db.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    let mut dx = vec![T::zero(); rows * m];
    gemm(rows, v, m, dy, false, w.data(), true, &mut dx, false);
    dx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Embedding width is `stack.input_dim`.
    pub stack: StackConfig,
}

/// Embedding → QRNN stack → softmax over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T> {
    pub config: LmConfig,
    pub embed: Tensor<T>,
    pub stack: QrnnStack<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

/// Result of one training or evaluation window.
pub struct LmStep<T> {
    pub loss: f64,
    pub grads: Option<LanguageModel<T>>,
    /// States to carry into the next window.
    pub states: Vec<LayerState<T>>,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: LmConfig, rng: &mut Rng) -> Result<Self> {
        if config.stack.masking != crate::qrnn::Masking::Masked {
            return Err(Error::Config("language models need masked convolutions".into()));
        }
        let (v, e, m) = (config.vocab_size, config.stack.input_dim, config.stack.hidden_dim);
        let embed = Tensor::uniform(&[v, e], -0.1, 0.1, rng);
        let stack = QrnnStack::new(config.stack.clone(), rng)?;
        let r = 1.0 / (m as f64).sqrt();
        let out_w = Tensor::uniform(&[m, v], -r, r, rng);
        let out_b = Tensor::zeros(&[v]);
        Ok(LanguageModel { config, embed, stack, out_w, out_b })
    }

    pub fn initial_states(&self, batch: usize) -> Vec<LayerState<T>> {
        self.stack.initial_states(batch)
    }

    /// Mean NLL of `targets` given `inputs` (`[B, T]` each) continuing
    /// from `states`; gradients are truncated at the window start.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        states: Option<&[LayerState<T>]>,
        rng: &mut Rng,
        training: bool,
        with_grads: bool,
    ) -> Result<LmStep<T>> {
        if batch == 0 || !inputs.len().is_multiple_of(batch) || inputs.len() != targets.len() || inputs.is_empty() {
            return Err(dim_err!("inputs/targets must be equal [B, T] id matrices"));
        }
        let steps = inputs.len() / batch;
        let e = embed(&self.embed, inputs, batch, steps)?;
        let (h, cache) = self.stack.forward(&e, states, rng, training)?;
        let rows = batch * steps;
        let logits = Tensor::new(&[rows, self.config.vocab_size], project(h.data(), rows, &self.out_w, &self.out_b))?;
        let (loss, dlogits) = softmax_nll(&logits, targets, None)?;
        let grads = if with_grads {
            let mut g = self.zeroed();
            let dh = project_backward(h.data(), rows, &self.out_w, dlogits.data(), &mut g.out_w, &mut g.out_b);
            let (de, sg) = self.stack.backward(&cache, &Tensor::new(h.shape(), dh)?)?;
            g.stack = sg;
            scatter_rows(&mut g.embed, inputs, de.data());
            Some(g)
        } else {
            None
        };
        Ok(LmStep { loss, grads, states: cache.final_states() })
    }

    /// Mean NLL over every target of `ids` batched into `batch` streams.
    pub fn evaluate(&self, ids: &[usize], batch: usize, bptt: usize) -> Result<f64> {
        let batches = batch_lm(ids, batch, bptt)?;
        let mut states = self.initial_states(batch);
        let mut rng = Rng::new(0);
        let (mut total, mut count) = (0.0, 0usize);
        for b in &batches {
            let s = self.step(&b.inputs, &b.targets, b.batch, Some(&states), &mut rng, false, false)?;
            let n = b.inputs.len();
            total += s.loss * n as f64;
            count += n;
            states = s.states;
        }
        Ok(total / count as f64)
    }
}

impl<T: Scalar> Parameters<T> for LanguageModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("embed".into(), &self.embed);
        self.stack.visit(&mut |n, t| f(format!("stack.{n}"), t));
        f("output.w".into(), &self.out_w);
        f("output.b".into(), &self.out_b);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f("embed".into(), &mut self.embed);
        self.stack.visit_mut(&mut |n, t| f(format!("stack.{n}"), t));
        f("output.w".into(), &mut self.out_w);
        f("output.b".into(), &mut self.out_b);
    }
}

impl<T: Scalar> HiddenStateSource<T> for LanguageModel<T> {
    type Input = [usize];

    fn last_layer_states(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Argument("empty sequence".into()));
        }
        let e = embed(&self.embed, ids, 1, ids.len())?;
        let (_, cache) = self.stack.forward(&e, None, &mut Rng::new(0), false)?;
        let states = cache.layer(self.stack.layers.len() - 1).states();
        states.reshape(&[ids.len(), self.config.stack.hidden_dim])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Mean of the last layer's outputs over the true (unpadded) length.
    Mean,
    /// Last layer's output at the final true timestep.
    Final,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::Mean),
            "final" => Ok(Readout::Final),
            other => Err(Error::Argument(format!("unknown readout '{other}' (expected mean or final)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub classes: usize,
    pub readout: Readout,
    pub stack: StackConfig,
}

/// Document classifier: embedding → (dense) QRNN stack → readout →
/// softmax over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub embed: Tensor<T>,
    pub stack: QrnnStack<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

pub struct ClassifierStep<T> {
    pub loss: f64,
    /// Predicted class per document.
    pub predictions: Vec<usize>,
    pub grads: Option<Classifier<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if config.stack.masking != crate::qrnn::Masking::Masked {
            // Padding sits after the text; only causal convolutions keep it
            // from leaking into the unpadded positions.
            return Err(Error::Config("classifiers need masked convolutions".into()));
        }
        let (v, e, m) = (config.vocab_size, config.stack.input_dim, config.stack.hidden_dim);
        let embed = Tensor::uniform(&[v, e], -0.1, 0.1, rng);
        let stack = QrnnStack::new(config.stack.clone(), rng)?;
        let r = 1.0 / (m as f64).sqrt();
        let out_w = Tensor::uniform(&[m, config.classes], -r, r, rng);
        let out_b = Tensor::zeros(&[config.classes]);
        Ok(Classifier { config, embed, stack, out_w, out_b })
    }

    pub fn step(&self, docs: &[&[usize]], labels: &[usize], rng: &mut Rng, training: bool, with_grads: bool) -> Result<ClassifierStep<T>> {
        if docs.is_empty() || docs.len() != labels.len() {
            return Err(dim_err!("{} documents with {} labels", docs.len(), labels.len()));
        }
        if docs.iter().any(|d| d.is_empty()) {
            return Err(Error::Argument("empty document".into()));
        }
        let batch = docs.len();
        let m = self.config.stack.hidden_dim;
        let (ids, steps, lengths) = pad_batch(docs);
        let e = embed(&self.embed, &ids, batch, steps)?;
        let (h, cache) = self.stack.forward(&e, None, rng, training)?;
        let mut pooled = vec![T::zero(); batch * m];
        for (b, &len) in lengths.iter().enumerate() {
            let dst = &mut pooled[b * m..(b + 1) * m];
            match self.config.readout {
                Readout::Mean => {
                    let inv = T::of(1.0 / len as f64);
                    for t in 0..len {
                        for (d, &v) in dst.iter_mut().zip(h.row(b * steps + t)) {
                            *d += v * inv;
                        }
                    }
                }
                Readout::Final => dst.copy_from_slice(h.row(b * steps + len - 1)),
            }
        }
        let k = self.config.classes;
        let logits = Tensor::new(&[batch, k], project(&pooled, batch, &self.out_w, &self.out_b))?;
        let predictions = (0..batch)
            .map(|b| {
                let row = logits.row(b);
                (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect();
        let (loss, dlogits) = softmax_nll(&logits, labels, None)?;
        let grads = if with_grads {
            let mut g = self.zeroed();
            let dpool = project_backward(&pooled, batch, &self.out_w, dlogits.data(), &mut g.out_w, &mut g.out_b);
            let mut dh = Tensor::zeros(h.shape());
            for (b, &len) in lengths.iter().enumerate() {
                let src = &dpool[b * m..(b + 1) * m];
                match self.config.readout {
                    Readout::Mean => {
                        let inv = T::of(1.0 / len as f64);
                        for t in 0..len {
                            for (d, &v) in dh.row_mut(b * steps + t).iter_mut().zip(src) {
                                *d = v * inv;
                            }
                        }
                    }
                    Readout::Final => dh.row_mut(b * steps + len - 1).copy_from_slice(src),
                }
            }
            let (de, sg) = self.stack.backward(&cache, &dh)?;
            g.stack = sg;
            scatter_rows(&mut g.embed, &ids, de.data());
            Some(g)
        } else {
            None
        };
        Ok(ClassifierStep { loss, predictions, grads })
    }
}

impl<T: Scalar> Parameters<T> for Classifier<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("embed".into(), &self.embed);
        self.stack.visit(&mut |n, t| f(format!("stack.{n}"), t));
        f("output.w".into(), &self.out_w);
        f("output.b".into(), &self.out_b);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f("embed".into(), &mut self.embed);
        self.stack.visit_mut(&mut |n, t| f(format!("stack.{n}"), t));
        f("output.w".into(), &mut self.out_w);
        f("output.b".into(), &mut self.out_b);
    }
}

impl<T: Scalar> HiddenStateSource<T> for Classifier<T> {
    type Input = [usize];

    fn last_layer_states(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Argument("empty document".into()));
        }
        let e = embed(&self.embed, ids, 1, ids.len())?;
        let (_, cache) = self.stack.forward(&e, None, &mut Rng::new(0), false)?;
        let states = cache.layer(self.stack.layers.len() - 1).states();
        states.reshape(&[ids.len(), self.config.stack.hidden_dim])
    }
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub valid_ppl: f64,
    /// Classification accuracy or exact-match rate, where meaningful.
    pub valid_accuracy: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_nll,valid_nll,valid_ppl,seconds";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.lr, self.train_nll, self.valid_nll, self.valid_ppl, self.seconds
        )
    }
}

fn apply_update<T: Scalar, P: Parameters<T>>(
    model: &mut P,
    grads: &mut P,
    opt: &mut Optimizer<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let norm = postprocess_gradients(grads, model, cfg.l2, cfg.max_grad_norm)?;
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm is not finite".into()));
    }
    opt.step(model, grads, lr)
}

/// Trains a language model with carried state across BPTT windows.
/// `on_epoch` sees every epoch's record and the model after it.
pub fn train_lm<T: Scalar>(
    model: &mut LanguageModel<T>,
    train: &[usize],
    valid: &[usize],
    cfg: &TrainConfig,
    eval_batch: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &LanguageModel<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let batches: Vec<LmBatch> = batch_lm(train, cfg.batch_size, cfg.bptt)?;
    let mut rng = Rng::new(cfg.seed).fork();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut states = model.initial_states(cfg.batch_size);
        let (mut total, mut count) = (0.0, 0usize);
        for b in &batches {
            let s = model.step(&b.inputs, &b.targets, b.batch, Some(&states), &mut rng, true, true)?;
            let mut grads = s.grads.expect("gradients requested");
            apply_update(model, &mut grads, &mut opt, cfg, lr)?;
            total += s.loss * b.inputs.len() as f64;
            count += b.inputs.len();
            states = s.states;
        }
        let valid_nll = model.evaluate(valid, eval_batch, cfg.bptt)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_nll: total / count as f64,
            valid_nll,
            valid_ppl: perplexity(valid_nll),
            valid_accuracy: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

/// Mean NLL and accuracy of a classifier over `docs`.
pub fn evaluate_classifier<T: Scalar>(model: &Classifier<T>, docs: &[(Vec<usize>, u8)], batch: usize) -> Result<(f64, f64)> {
    let mut rng = Rng::new(0);
    let (mut nll, mut correct) = (0.0, 0usize);
    for chunk in docs.chunks(batch.max(1)) {
        let ds: Vec<&[usize]> = chunk.iter().map(|(d, _)| d.as_slice()).collect();
        let ls: Vec<usize> = chunk.iter().map(|(_, l)| *l as usize).collect();
        let s = model.step(&ds, &ls, &mut rng, false, false)?;
        nll += s.loss * chunk.len() as f64;
        correct += s.predictions.iter().zip(&ls).filter(|(p, l)| p == l).count();
    }
    let n = docs.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

pub fn train_classifier<T: Scalar>(
    model: &mut Classifier<T>,
    train: &[(Vec<usize>, u8)],
    valid: &[(Vec<usize>, u8)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Classifier<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("classification needs non-empty training and validation sets".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let ds: Vec<&[usize]> = idx.iter().map(|&i| train[i].0.as_slice()).collect();
            let ls: Vec<usize> = idx.iter().map(|&i| train[i].1 as usize).collect();
            let s = model.step(&ds, &ls, &mut rng, true, true)?;
            let mut grads = s.grads.expect("gradients requested");
            apply_update(model, &mut grads, &mut opt, cfg, lr)?;
            total += s.loss * idx.len() as f64;
            count += idx.len();
        }
        let (valid_nll, acc) = evaluate_classifier(model, valid, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_nll: total / count as f64,
            valid_nll,
            valid_ppl: perplexity(valid_nll),
            valid_accuracy: Some(acc),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

/// Token-weighted mean NLL of a translation model over `pairs`.
pub fn evaluate_seq2seq<T: Scalar>(model: &Seq2Seq<T>, pairs: &[(Vec<usize>, Vec<usize>)], batch: usize) -> Result<f64> {
    let mut rng = Rng::new(0);
    let (mut total, mut count) = (0.0, 0usize);
    for idx in bucket_by_length(pairs, batch, &mut rng) {
        let (src, tgt) = gather_pairs(pairs, &idx);
        let (loss, _) = model.loss(&src, &tgt, idx.len(), false)?;
        let n = tgt.len() + idx.len();
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn gather_pairs(pairs: &[(Vec<usize>, Vec<usize>)], idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src = idx.iter().flat_map(|&i| pairs[i].0.iter().copied()).collect();
    let tgt = idx.iter().flat_map(|&i| pairs[i].1.iter().copied()).collect();
    (src, tgt)
}

/// Trains an encoder–decoder on length-bucketed batches.
pub fn train_seq2seq<T: Scalar>(
    model: &mut Seq2Seq<T>,
    train: &[(Vec<usize>, Vec<usize>)],
    valid: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Seq2Seq<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("translation needs non-empty training and validation sets".into()));
    }
    if train.iter().chain(valid).any(|(s, _)| s.is_empty()) {
        return Err(Error::Data("empty source sentence in corpus".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in bucket_by_length(train, cfg.batch_size, &mut rng) {
            let (src, tgt) = gather_pairs(train, &idx);
            let (loss, grads) = model.loss(&src, &tgt, idx.len(), true)?;
            let mut grads = grads.expect("gradients requested");
            apply_update(model, &mut grads, &mut opt, cfg, lr)?;
            let n = tgt.len() + idx.len();
            total += loss * n as f64;
            count += n;
        }
        let valid_nll = evaluate_seq2seq(model, valid, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_nll: total / count as f64,
            valid_nll,
            valid_ppl: perplexity(valid_nll),
            valid_accuracy: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qrnn::{Masking, Pooling};

    fn stack_cfg(input: usize, dense: bool) -> StackConfig {
        StackConfig {
            input_dim: input,
            hidden_dim: 8,
            filter_widths: vec![2, 2],
            pooling: Pooling::Fo,
            masking: Masking::Masked,
            zoneout: 0.0,
            dropout: 0.0,
            dense,
        }
    }

    #[test]
    fn lm_memorizes_tiny_corpus() {
        let cfg = LmConfig { vocab_size: 8, stack: stack_cfg(6, false) };
        let mut lm = LanguageModel::<f64>::new(cfg, &mut Rng::new(0)).unwrap();
        let ids: Vec<usize> = (0..200).map(|i| 4 + i % 4).collect();
        let tc = TrainConfig {
            optimizer: crate::train::OptimizerKind::Adam,
            lr: 0.02,
            epochs: 15,
            batch_size: 2,
            bptt: 20,
            ..TrainConfig::default()
        };
        let recs = train_lm(&mut lm, &ids, &ids, &tc, 1, |_, _| Ok(())).unwrap();
        assert!(recs.last().unwrap().train_nll < 8f64.ln() / 10.0, "{:?}", recs.last());
    }

    #[test]
    fn lm_rejects_unmasked_stack() {
        let mut s = stack_cfg(6, false);
        s.masking = Masking::Unmasked;
        assert!(matches!(
            LanguageModel::<f64>::new(LmConfig { vocab_size: 8, stack: s }, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classifier_padding_does_not_leak() {
        let cfg = ClassifierConfig { vocab_size: 10, classes: 2, readout: Readout::Mean, stack: stack_cfg(4, true) };
        let c = Classifier::<f64>::new(cfg, &mut Rng::new(0)).unwrap();
        let a: &[usize] = &[4, 5, 6];
        let long: &[usize] = &[7, 8, 9, 4, 5, 6, 7];
        let alone = c.step(&[a], &[1], &mut Rng::new(0), false, false).unwrap();
        let padded = c.step(&[a, long], &[1, 0], &mut Rng::new(0), false, false).unwrap();
        let alone2 = c.step(&[long], &[0], &mut Rng::new(0), false, false).unwrap();
        assert!((alone.loss + alone2.loss - 2.0 * padded.loss).abs() < 1e-12);
    }

    #[test]
    fn dump_matches_stack_states() {
        let cfg = LmConfig { vocab_size: 8, stack: stack_cfg(6, false) };
        let lm = LanguageModel::<f64>::new(cfg, &mut Rng::new(0)).unwrap();
        let s = lm.last_layer_states(&[4, 5, 6]).unwrap();
        assert_eq!(s.shape(), &[3, 8]);
    }
}
