//! QRNN encoder–decoder with encoder-conditioned decoder convolutions,
//! dot-product attention over the decoder's un-gated states, and beam
//! search with a length-bonus ranking criterion.
//!
//! Vectors are rows throughout: a projection of `x` by `W` is `x·W`.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::qrnn::{ForwardArgs, Gates, LayerCache, LayerState, Masking, Pooling, QrnnConfig, QrnnLayer};
use crate::tensor::{gemm, log_softmax_rows, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Filter width of the first encoder layer.
    pub encoder_first_width: usize,
    /// Filter width of the remaining encoder layers.
    pub encoder_width: usize,
    pub decoder_width: usize,
    /// Feed the source to the encoder back to front.
    pub reverse_source: bool,
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.layers == 0
            || self.encoder_first_width == 0
            || self.encoder_width == 0
            || self.decoder_width == 0
        {
            return Err(Error::Config(format!("invalid encoder–decoder configuration {self:?}")));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    fn encoder_layer(&self, l: usize) -> QrnnConfig {
        let k = if l == 0 { self.encoder_first_width } else { self.encoder_width };
        QrnnConfig::new(k, self.layer_input(l), self.hidden_dim, Pooling::Fo).masking(Masking::Unmasked)
    }

    fn decoder_layer(&self, l: usize) -> QrnnConfig {
        QrnnConfig::new(self.decoder_width, self.layer_input(l), self.hidden_dim, Pooling::Fo)
    }
}

/// Per-decoder-layer projections of the encoder's final state into the
/// `z`, `f` and `o` pre-activations.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderProjections<T> {
    pub v_z: Tensor<T>,
    pub v_f: Tensor<T>,
    pub v_o: Tensor<T>,
}

impl<T: Scalar> DecoderProjections<T> {
    fn init(m: usize, rng: &mut Rng) -> Self {
        let r = 1.0 / (m as f64).sqrt();
        DecoderProjections {
            v_z: Tensor::uniform(&[m, m], -r, r, rng),
            v_f: Tensor::uniform(&[m, m], -r, r, rng),
            v_o: Tensor::uniform(&[m, m], -r, r, rng),
        }
    }

    /// `[m, 3m]` with column blocks `V_z | V_f | V_o`.
    fn fused(&self) -> Vec<T> {
        let m = self.v_z.shape()[0];
        let mut out = Vec::with_capacity(3 * m * m);
        for r in 0..m {
            out.extend_from_slice(self.v_z.row(r));
            out.extend_from_slice(self.v_f.row(r));
            out.extend_from_slice(self.v_o.row(r));
        }
        out
    }

    fn from_fused(m: usize, v: &[T]) -> Self {
        let block = |b: usize| Tensor::from_fn(&[m, m], |i| v[(i / m) * 3 * m + b * m + i % m]);
        DecoderProjections { v_z: block(0), v_f: block(1), v_o: block(2) }
    }

    /// `[B, 3m]` supplement for final encoder states `h` (`[B, m]`).
    fn supplement(&self, h: &[T], batch: usize) -> Vec<T> {
        let m = self.v_z.shape()[0];
        let mut out = vec![T::zero(); batch * 3 * m];
        gemm(batch, m, 3 * m, h, false, &self.fused(), false, &mut out, false);
        out
    }
}

/// Gates of a decoder layer whose convolution outputs are supplemented at
/// every timestep by the projected final encoder state `h̃` (`[m]`, or
/// `[B, m]` for batched input).
pub fn decoder_conv_supplemented<T: Scalar>(
    x: &Tensor<T>,
    layer: &QrnnLayer<T>,
    projections: &DecoderProjections<T>,
    h_tilde: &Tensor<T>,
) -> Result<Gates<T>> {
    let (batch, _, _) = x.dims3()?;
    let m = layer.config.hidden_dim;
    if layer.config.pooling != Pooling::Fo || projections.v_z.shape() != [m, m] {
        return Err(dim_err!("supplemented convolutions need an fo layer with m×m projections"));
    }
    if h_tilde.len() != batch * m {
        return Err(dim_err!("encoder state {:?} does not match batch {} × hidden {}", h_tilde.shape(), batch, m));
    }
    let supp = Tensor::new(&[batch, 3 * m], projections.supplement(h_tilde.data(), batch))?;
    let args = ForwardArgs { supplement: Some(&supp), ..Default::default() };
    Ok(layer.forward_with(x, args)?.1.gates())
}

/// Record of one attention evaluation, `B` independent problems of `T`
/// queries over `S` encoder states.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    dims: (usize, usize, usize, usize),
    c: Vec<T>,
    o: Vec<T>,
    h_enc: Vec<T>,
    alpha: Vec<T>,
    k: Vec<T>,
    p: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub dc: Tensor<T>,
    pub d_o: Tensor<T>,
    pub dh_enc: Tensor<T>,
    pub dw_k: Tensor<T>,
    pub dw_c: Tensor<T>,
}

fn attention_forward<T: Scalar>(
    c: &[T],
    o: &[T],
    h_enc: &[T],
    w_k: &[T],
    w_c: &[T],
    (b, t, s, m): (usize, usize, usize, usize),
) -> (Vec<T>, AttentionCache<T>) {
    let mut alpha = vec![T::zero(); b * t * s];
    let mut k = vec![T::zero(); b * t * m];
    for bi in 0..b {
        let cb = &c[bi * t * m..(bi + 1) * t * m];
        let hb = &h_enc[bi * s * m..(bi + 1) * s * m];
        let ab = &mut alpha[bi * t * s..(bi + 1) * t * s];
        gemm(t, m, s, cb, false, hb, true, ab, false);
        log_softmax_rows(ab, s);
        for a in ab.iter_mut() {
            *a = a.exp();
        }
        gemm(t, s, m, ab, false, hb, false, &mut k[bi * t * m..(bi + 1) * t * m], false);
    }
    let rows = b * t;
    let mut p = vec![T::zero(); rows * m];
    gemm(rows, m, m, &k, false, w_k, false, &mut p, false);
    gemm(rows, m, m, c, false, w_c, false, &mut p, true);
    let h = p.iter().zip(o).map(|(&p, &o)| o * p).collect();
    let cache = AttentionCache {
        dims: (b, t, s, m),
        c: c.to_vec(),
        o: o.to_vec(),
        h_enc: h_enc.to_vec(),
        alpha,
        k,
        p,
    };
    (h, cache)
}

impl<T: Scalar> AttentionCache<T> {
    /// Attention weights `α`, `[B, T, S]`.
    pub fn weights(&self) -> Tensor<T> {
        let (b, t, s, _) = self.dims;
        Tensor::new(&[b, t, s], self.alpha.clone()).expect("attention shape")
    }

    fn backward_raw(&self, w_k: &[T], w_c: &[T], dh: &[T]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let (b, t, s, m) = self.dims;
        let rows = b * t;
        let d_o: Vec<T> = dh.iter().zip(&self.p).map(|(&g, &p)| g * p).collect();
        let dp: Vec<T> = dh.iter().zip(&self.o).map(|(&g, &o)| g * o).collect();
        let mut dw_k = vec![T::zero(); m * m];
        gemm(m, rows, m, &self.k, true, &dp, false, &mut dw_k, false);
        let mut dw_c = vec![T::zero(); m * m];
        gemm(m, rows, m, &self.c, true, &dp, false, &mut dw_c, false);
        let mut dk = vec![T::zero(); rows * m];
        gemm(rows, m, m, &dp, false, w_k, true, &mut dk, false);
        let mut dc = vec![T::zero(); rows * m];
        gemm(rows, m, m, &dp, false, w_c, true, &mut dc, false);
        let mut dh_enc = vec![T::zero(); b * s * m];
        let mut dalpha = vec![T::zero(); t * s];
        for bi in 0..b {
            let hb = &self.h_enc[bi * s * m..(bi + 1) * s * m];
            let cb = &self.c[bi * t * m..(bi + 1) * t * m];
            let ab = &self.alpha[bi * t * s..(bi + 1) * t * s];
            let dkb = &dk[bi * t * m..(bi + 1) * t * m];
            let dhb = &mut dh_enc[bi * s * m..(bi + 1) * s * m];
            // k = α·H̃
            gemm(t, m, s, dkb, false, hb, true, &mut dalpha, false);
            gemm(s, t, m, ab, true, dkb, false, dhb, false);
            // α = softmax(C·H̃ᵀ)
            for (arow, drow) in ab.chunks_exact(s).zip(dalpha.chunks_exact_mut(s)) {
                let dot: T = arow.iter().zip(drow.iter()).map(|(&a, &d)| a * d).sum();
                for (d, &a) in drow.iter_mut().zip(arow) {
                    *d = a * (*d - dot);
                }
            }
            gemm(t, s, m, &dalpha, false, hb, false, &mut dc[bi * t * m..(bi + 1) * t * m], true);
            gemm(s, t, m, &dalpha, true, cb, false, dhb, true);
        }
        (dc, d_o, dh_enc, dw_k, dw_c)
    }

    /// Gradients of the attention output `h = o ⊙ (k·W_k + c·W_c)` given
    /// `∂L/∂h`.
    pub fn backward(&self, w_k: &Tensor<T>, w_c: &Tensor<T>, dh: &Tensor<T>) -> Result<AttentionGrads<T>> {
        let (b, t, s, m) = self.dims;
        if dh.len() != b * t * m || w_k.shape() != [m, m] || w_c.shape() != [m, m] {
            return Err(dim_err!("attention backward shapes do not match the cache"));
        }
        let (dc, d_o, dh_enc, dw_k, dw_c) = self.backward_raw(w_k.data(), w_c.data(), dh.data());
        let seq = |len: usize| if b == 1 { vec![len, m] } else { vec![b, len, m] };
        Ok(AttentionGrads {
            dc: Tensor::new(&seq(t), dc)?,
            d_o: Tensor::new(&seq(t), d_o)?,
            dh_enc: Tensor::new(&seq(s), dh_enc)?,
            dw_k: Tensor::new(&[m, m], dw_k)?,
            dw_c: Tensor::new(&[m, m], dw_c)?,
        })
    }
}

/// Attention with its cache. `c`, `o` are `[T, m]` (or `[B, T, m]`),
/// `h_enc` is `[S, m]` (or `[B, S, m]`).
pub fn attend_with_cache<T: Scalar>(
    c: &Tensor<T>,
    h_enc: &Tensor<T>,
    o: &Tensor<T>,
    w_k: &Tensor<T>,
    w_c: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (b, t, m) = c.dims3()?;
    let (be, s, me) = h_enc.dims3()?;
    if be != b || me != m || o.shape() != c.shape() || w_k.shape() != [m, m] || w_c.shape() != [m, m] {
        return Err(dim_err!(
            "attention shapes disagree: c {:?}, h_enc {:?}, o {:?}, W_k {:?}, W_c {:?}",
            c.shape(),
            h_enc.shape(),
            o.shape(),
            w_k.shape(),
            w_c.shape()
        ));
    }
    let (h, cache) = attention_forward(c.data(), o.data(), h_enc.data(), w_k.data(), w_c.data(), (b, t, s, m));
    Ok((Tensor::new(c.shape(), h)?, cache))
}

/// `h_t = o_t ⊙ (k_t·W_k + c_t·W_c)` with `k_t = Σ_s α_ts h̃_s` and
/// `α_t = softmax_s(c_t · h̃_s)`.
pub fn attend<T: Scalar>(
    c: &Tensor<T>,
    h_enc: &Tensor<T>,
    o: &Tensor<T>,
    w_k: &Tensor<T>,
    w_c: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(attend_with_cache(c, h_enc, o, w_k, w_c)?.0)
}

/// Beam ranking score `[∏_{t=T}^{T_trg} (t+α)/t] · sum_logp`; the product
/// is empty (1) when `T > T_trg`.
pub fn rank_hypothesis(sum_logp: f64, length: usize, target_length: usize, alpha: f64) -> Result<f64> {
    if length == 0 {
        return Err(Error::Argument("hypothesis length must be at least 1".into()));
    }
    let factor: f64 = (length..=target_length).map(|t| (t as f64 + alpha) / t as f64).product();
    Ok(factor * sum_logp)
}

/// Encoder outputs for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    /// Final gated state `h̃^ℓ` of every encoder layer, `[m]` each.
    pub finals: Vec<Tensor<T>>,
    /// Last encoder layer's states, `[S, m]`.
    pub states: Tensor<T>,
}

/// A partial translation during beam search.
#[derive(Clone, Debug)]
pub struct Hypothesis<T> {
    /// Token ids, starting with BOS.
    pub tokens: Vec<usize>,
    pub sum_logp: f64,
    /// Recurrent state of every decoder layer.
    pub states: Vec<LayerState<T>>,
    pub finished: bool,
    pub score: f64,
}

impl<T> Hypothesis<T> {
    /// Number of generated tokens (EOS included, BOS excluded).
    pub fn length(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Generated ids without BOS or the final EOS.
    pub tokens: Vec<usize>,
    pub sum_logp: f64,
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq<T> {
    pub config: Seq2SeqConfig,
    pub src_embed: Tensor<T>,
    pub tgt_embed: Tensor<T>,
    pub encoder: Vec<QrnnLayer<T>>,
    pub decoder: Vec<QrnnLayer<T>>,
    pub projections: Vec<DecoderProjections<T>>,
    pub w_k: Tensor<T>,
    pub w_c: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

struct EncoderRun<T> {
    caches: Vec<LayerCache<T>>,
    /// `[B·m]` per layer.
    finals: Vec<Vec<T>>,
    /// `[B, S, m]`
    top: Vec<T>,
}

/// Teacher-forced forward record for a batch of equal-length pairs.
pub struct Seq2SeqCache<T> {
    batch: usize,
    src_len: usize,
    tgt_len: usize,
    /// Source ids in encoder order (after any reversal).
    src: Vec<usize>,
    /// Decoder inputs (BOS + target).
    dec_in: Vec<usize>,
    enc: EncoderRun<T>,
    dec: Vec<LayerCache<T>>,
    attn: AttentionCache<T>,
    attn_out: Vec<T>,
}

fn embed<T: Scalar>(table: &Tensor<T>, ids: &[usize], batch: usize, steps: usize) -> Result<Tensor<T>> {
    let e = table.last_dim();
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[batch, steps, e], out)
}

fn scatter_rows<T: Scalar>(grad: &mut Tensor<T>, ids: &[usize], d: &[T]) {
    let e = grad.last_dim();
    for (r, &id) in ids.iter().enumerate() {
        for (g, &v) in grad.row_mut(id).iter_mut().zip(&d[r * e..(r + 1) * e]) {
            *g += v;
        }
    }
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(config: Seq2SeqConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, m) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let r = 1.0 / (m as f64).sqrt();
        let src_embed = Tensor::uniform(&[v, e], -0.1, 0.1, rng);
        let tgt_embed = Tensor::uniform(&[v, e], -0.1, 0.1, rng);
        let encoder = (0..config.layers)
            .map(|l| QrnnLayer::new(config.encoder_layer(l), rng))
            .collect::<Result<_>>()?;
        let decoder = (0..config.layers)
            .map(|l| QrnnLayer::new(config.decoder_layer(l), rng))
            .collect::<Result<_>>()?;
        let projections = (0..config.layers).map(|_| DecoderProjections::init(m, rng)).collect();
        let w_k = Tensor::uniform(&[m, m], -r, r, rng);
        let w_c = Tensor::uniform(&[m, m], -r, r, rng);
        let out_w = Tensor::uniform(&[m, v], -r, r, rng);
        let out_b = Tensor::zeros(&[v]);
        Ok(Seq2Seq { config, src_embed, tgt_embed, encoder, decoder, projections, w_k, w_c, out_w, out_b })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Source ids `[B, S]` in the order the encoder reads them.
    fn encoder_order(&self, src: &[usize], batch: usize, steps: usize) -> Vec<usize> {
        if !self.config.reverse_source {
            return src.to_vec();
        }
        src.chunks_exact(steps.max(1))
            .take(batch)
            .flat_map(|row| row.iter().rev().copied())
            .collect()
    }

    fn run_encoder(&self, src_ordered: &[usize], batch: usize, steps: usize) -> Result<EncoderRun<T>> {
        let m = self.config.hidden_dim;
        let mut x = embed(&self.src_embed, src_ordered, batch, steps)?;
        let mut caches = Vec::with_capacity(self.encoder.len());
        let mut finals = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (h, cache) = layer.forward_with(&x, ForwardArgs::default())?;
            let mut fin = Vec::with_capacity(batch * m);
            for b in 0..batch {
                fin.extend_from_slice(h.row(b * steps + steps - 1));
            }
            finals.push(fin);
            caches.push(cache);
            x = h;
        }
        Ok(EncoderRun { caches, finals, top: x.into_data() })
    }

    /// Encodes one source sentence.
    pub fn encode(&self, src: &[usize]) -> Result<Encoded<T>> {
        if src.is_empty() {
            return Err(Error::Argument("empty source sequence".into()));
        }
        self.check_ids(src)?;
        let m = self.config.hidden_dim;
        let run = self.run_encoder(&self.encoder_order(src, 1, src.len()), 1, src.len())?;
        Ok(Encoded {
            finals: run.finals.into_iter().map(|f| Tensor::new(&[m], f)).collect::<Result<_>>()?,
            states: Tensor::new(&[src.len(), m], run.top)?,
        })
    }

    fn project_out(&self, h: &[T], rows: usize) -> Vec<T> {
        let (m, v) = (self.config.hidden_dim, self.config.vocab_size);
        let mut logits = vec![T::zero(); rows * v];
        gemm(rows, m, v, h, false, self.out_w.data(), false, &mut logits, false);
        crate::qrnn::add_bias(&mut logits, self.out_b.data());
        logits
    }

    /// Teacher-forced decoding for a batch of pairs sharing source length
    /// `S` and target length `T` (`src` is `[B, S]`, `tgt` `[B, T]`, neither
    /// containing BOS/EOS). Returns log-probabilities `[B, T+1, V]` for
    /// the targets `tgt + EOS`.
    pub fn forward_batch(&self, src: &[usize], tgt: &[usize], batch: usize) -> Result<(Tensor<T>, Seq2SeqCache<T>)> {
        if batch == 0 || src.is_empty() || !src.len().is_multiple_of(batch) || !tgt.len().is_multiple_of(batch) {
            return Err(Error::Argument("source and target must be non-empty [B, len] id matrices".into()));
        }
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        let (s_len, t_len) = (src.len() / batch, tgt.len() / batch + 1);
        let m = self.config.hidden_dim;
        let src_ordered = self.encoder_order(src, batch, s_len);
        let enc = self.run_encoder(&src_ordered, batch, s_len)?;

        let mut dec_in = Vec::with_capacity(batch * t_len);
        for b in 0..batch {
            dec_in.push(BOS);
            dec_in.extend_from_slice(&tgt[b * (t_len - 1)..(b + 1) * (t_len - 1)]);
        }
        let mut x = embed(&self.tgt_embed, &dec_in, batch, t_len)?;
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (l, layer) in self.decoder.iter().enumerate() {
            let supp = Tensor::new(&[batch, 3 * m], self.projections[l].supplement(&enc.finals[l], batch))?;
            let args = ForwardArgs { supplement: Some(&supp), ..Default::default() };
            let (h, cache) = layer.forward_with(&x, args)?;
            dec.push(cache);
            x = h;
        }
        let last = dec.last().unwrap();
        let (attn_out, attn) = attention_forward(
            last.state_slice(),
            last.output_gate().unwrap(),
            &enc.top,
            self.w_k.data(),
            self.w_c.data(),
            (batch, t_len, s_len, m),
        );
        let mut logits = self.project_out(&attn_out, batch * t_len);
        log_softmax_rows(&mut logits, self.config.vocab_size);
        let lp = Tensor::new(&[batch, t_len, self.config.vocab_size], logits)?;
        let cache = Seq2SeqCache { batch, src_len: s_len, tgt_len: t_len, src: src_ordered, dec_in, enc, dec, attn, attn_out };
        Ok((lp, cache))
    }

    /// Per-position log-probabilities `[T+1, V]` of `tgt + EOS` given `src`.
    pub fn decode_training(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor<T>> {
        let (lp, _) = self.forward_batch(src, tgt, 1)?;
        let (_, t, v) = lp.dims3()?;
        lp.reshape(&[t, v])
    }

    /// Gradients of a scalar loss given `∂L/∂logits` (`[B, T+1, V]`, the
    /// logits feeding the log-softmax).
    pub fn backward(&self, cache: &Seq2SeqCache<T>, dlogits: &Tensor<T>) -> Result<Self> {
        let (b, s, t) = (cache.batch, cache.src_len, cache.tgt_len);
        let (m, v) = (self.config.hidden_dim, self.config.vocab_size);
        let rows = b * t;
        if dlogits.len() != rows * v {
            return Err(dim_err!("logit gradient {:?} does not match [{}, {}, {}]", dlogits.shape(), b, t, v));
        }
        let mut g = self.zeroed();
        let dl = dlogits.data();
        gemm(m, rows, v, &cache.attn_out, true, dl, false, g.out_w.data_mut(), false);
        for row in dl.chunks_exact(v) {
            for (a, &x) in g.out_b.data_mut().iter_mut().zip(row) {
                *a += x;
            }
        }
        let mut dh = vec![T::zero(); rows * m];
        gemm(rows, v, m, dl, false, self.out_w.data(), true, &mut dh, false);

        let (dc, d_o, dh_enc_top, dw_k, dw_c) = cache.attn.backward_raw(self.w_k.data(), self.w_c.data(), &dh);
        g.w_k.data_mut().copy_from_slice(&dw_k);
        g.w_c.data_mut().copy_from_slice(&dw_c);

        // Decoder, top to bottom.
        let n_layers = self.decoder.len();
        let mut d_final = vec![vec![T::zero(); b * m]; n_layers];
        let mut dx: Option<Tensor<T>> = None;
        for l in (0..n_layers).rev() {
            let grads = if l == n_layers - 1 {
                self.decoder[l].backward_states(&cache.dec[l], &dc, Some(&d_o))?
            } else {
                self.decoder[l].backward(&cache.dec[l], dx.as_ref().unwrap())?
            };
            let ds = grads.d_supplement.as_ref().expect("decoder layers are supplemented");
            let proj = &self.projections[l];
            let fused = proj.fused();
            let mut dv = vec![T::zero(); m * 3 * m];
            gemm(m, b, 3 * m, &cache.enc.finals[l], true, ds.data(), false, &mut dv, false);
            g.projections[l] = DecoderProjections::from_fused(m, &dv);
            gemm(b, 3 * m, m, ds.data(), false, &fused, true, &mut d_final[l], false);
            g.decoder[l].banks = grads.banks;
            dx = Some(grads.dx);
        }
        scatter_rows(&mut g.tgt_embed, &cache.dec_in, dx.unwrap().data());

        // Encoder, top to bottom; each layer's output gradient collects
        // the final-state path and the next layer's input gradient.
        let mut dout = dh_enc_top;
        for l in (0..self.encoder.len()).rev() {
            for bi in 0..b {
                let r = bi * s + s - 1;
                for j in 0..m {
                    dout[r * m + j] += d_final[l][bi * m + j];
                }
            }
            let dtensor = Tensor::new(&[b, s, m], dout)?;
            let grads = self.encoder[l].backward(&cache.enc.caches[l], &dtensor)?;
            g.encoder[l].banks = grads.banks;
            dout = grads.dx.into_data();
        }
        scatter_rows(&mut g.src_embed, &cache.src, &dout);
        Ok(g)
    }

    /// Mean NLL over all `B·(T+1)` target positions and, when requested,
    /// its gradients.
    pub fn loss(&self, src: &[usize], tgt: &[usize], batch: usize, with_grads: bool) -> Result<(f64, Option<Self>)> {
        let (lp, cache) = self.forward_batch(src, tgt, batch)?;
        let t_len = cache.tgt_len;
        let mut targets = Vec::with_capacity(batch * t_len);
        for b in 0..batch {
            targets.extend_from_slice(&tgt[b * (t_len - 1)..(b + 1) * (t_len - 1)]);
            targets.push(EOS);
        }
        let (loss, dlogits) = crate::train::nll_loss(&lp, &targets, None)?;
        let grads = if with_grads { Some(self.backward(&cache, &dlogits)?) } else { None };
        Ok((loss, grads))
    }

    /// Zeroed per-layer decoder states for one hypothesis.
    fn initial_states(&self) -> Vec<LayerState<T>> {
        self.decoder.iter().map(|l| LayerState::zeros(1, &l.config)).collect()
    }

    /// One decoding step for `n` hypotheses of the same source: returns
    /// log-probabilities `[n, V]` and the advanced states.
    fn step(
        &self,
        enc: &Encoded<T>,
        supplements: &[Vec<T>],
        last_tokens: &[usize],
        states: &[&[LayerState<T>]],
    ) -> Result<(Vec<T>, Vec<Vec<LayerState<T>>>)> {
        let n = last_tokens.len();
        let m = self.config.hidden_dim;
        let mut x = embed(&self.tgt_embed, last_tokens, n, 1)?;
        let mut new_states: Vec<Vec<LayerState<T>>> = vec![Vec::with_capacity(self.decoder.len()); n];
        let mut last_cache = None;
        for (l, layer) in self.decoder.iter().enumerate() {
            let merged = LayerState {
                batch: n,
                c: states.iter().flat_map(|s| s[l].c.iter().copied()).collect(),
                history: states.iter().flat_map(|s| s[l].history.iter().copied()).collect(),
            };
            let supp = Tensor::new(&[n, 3 * m], supplements[l].repeat(n))?;
            let args = ForwardArgs { state: Some(&merged), supplement: Some(&supp), zoneout_rng: None };
            let (h, cache) = layer.forward_with(&x, args)?;
            let fin = cache.final_state();
            let (cw, hw) = (fin.c.len() / n, fin.history.len() / n);
            for (i, ns) in new_states.iter_mut().enumerate() {
                ns.push(LayerState {
                    batch: 1,
                    c: fin.c[i * cw..(i + 1) * cw].to_vec(),
                    history: fin.history[i * hw..(i + 1) * hw].to_vec(),
                });
            }
            x = h;
            last_cache = Some(cache);
        }
        let last = last_cache.unwrap();
        let s = enc.states.shape()[0];
        let (h, _) = attention_forward(
            last.state_slice(),
            last.output_gate().unwrap(),
            enc.states.data(),
            self.w_k.data(),
            self.w_c.data(),
            (1, n, s, m),
        );
        let mut logits = self.project_out(&h, n);
        log_softmax_rows(&mut logits, self.config.vocab_size);
        Ok((logits, new_states))
    }

    /// Log-probabilities `[T+1, V]` of `tgt + EOS` computed one step at a
    /// time with carried decoder state, as beam search does.
    pub fn decode_incremental(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor<T>> {
        let enc = self.encode(src)?;
        self.check_ids(tgt)?;
        let supplements = self.supplements(&enc);
        let mut states = self.initial_states();
        let mut out = Vec::new();
        let mut prev = BOS;
        for i in 0..=tgt.len() {
            let (lp, mut ns) = self.step(&enc, &supplements, &[prev], &[&states])?;
            out.extend(lp);
            states = ns.pop().unwrap();
            if i < tgt.len() {
                prev = tgt[i];
            }
        }
        Tensor::new(&[tgt.len() + 1, self.config.vocab_size], out)
    }

    fn supplements(&self, enc: &Encoded<T>) -> Vec<Vec<T>> {
        self.projections
            .iter()
            .zip(&enc.finals)
            .map(|(p, h)| p.supplement(h.data(), 1))
            .collect()
    }

    /// Beam search with the length-bonus ranking criterion; the target
    /// length for ranking is the source length plus five.
    pub fn beam_search(&self, src: &[usize], beam_width: usize, alpha: f64, max_len: usize) -> Result<Translation> {
        if src.is_empty() {
            return Err(Error::Argument("empty source sequence".into()));
        }
        if beam_width == 0 || max_len == 0 {
            return Err(Error::Argument("beam width and maximum length must be positive".into()));
        }
        let enc = self.encode(src)?;
        let supplements = self.supplements(&enc);
        let t_trg = src.len() + 5;
        let v = self.config.vocab_size;
        let mut beam = vec![Hypothesis {
            tokens: vec![BOS],
            sum_logp: 0.0,
            states: self.initial_states(),
            finished: false,
            score: 0.0,
        }];
        let mut completed: Vec<Hypothesis<T>> = Vec::new();
        for _ in 0..max_len {
            let live: Vec<&Hypothesis<T>> = beam.iter().filter(|h| !h.finished).collect();
            if live.is_empty() {
                break;
            }
            let last: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap()).collect();
            let states: Vec<&[LayerState<T>]> = live.iter().map(|h| h.states.as_slice()).collect();
            let (lp, new_states) = self.step(&enc, &supplements, &last, &states)?;
            let mut pool: Vec<Hypothesis<T>> = beam.iter().filter(|h| h.finished).cloned().collect();
            for ((hyp, row), st) in live.iter().zip(lp.chunks_exact(v)).zip(new_states) {
                // Expansions of one parent share a length, so their scores
                // order like their log-probabilities: the top `beam_width`
                // tokens suffice.
                let mut ids: Vec<usize> = (0..v).collect();
                ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
                for &tok in ids.iter().take(beam_width) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    let sum_logp = hyp.sum_logp + row[tok].to_f64().unwrap_or(f64::NEG_INFINITY);
                    let score = rank_hypothesis(sum_logp, tokens.len() - 1, t_trg, alpha)?;
                    pool.push(Hypothesis { tokens, sum_logp, states: st.clone(), finished: tok == EOS, score });
                }
            }
            sort_hypotheses(&mut pool);
            for dropped in pool.drain(beam_width.min(pool.len())..) {
                if dropped.finished {
                    completed.push(dropped);
                }
            }
            beam = pool;
        }
        completed.extend(beam.iter().filter(|h| h.finished).cloned());
        sort_hypotheses(&mut completed);
        let (best, finished) = match completed.into_iter().next() {
            Some(h) => (h, true),
            None => (beam.into_iter().next().expect("beam is never empty"), false),
        };
        let mut tokens = best.tokens[1..].to_vec();
        if finished {
            tokens.pop();
        }
        Ok(Translation { tokens, sum_logp: best.sum_logp, score: best.score, finished })
    }

    /// Greedy argmax decoding (lowest id on ties).
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Translation> {
        let enc = self.encode(src)?;
        let supplements = self.supplements(&enc);
        let t_trg = src.len() + 5;
        let mut states = self.initial_states();
        let mut tokens = Vec::new();
        let mut sum_logp = 0.0;
        let mut prev = BOS;
        for _ in 0..max_len {
            let (lp, mut ns) = self.step(&enc, &supplements, &[prev], &[&states])?;
            states = ns.pop().unwrap();
            let mut best = 0;
            for (i, &x) in lp.iter().enumerate() {
                if x > lp[best] {
                    best = i;
                }
            }
            sum_logp += lp[best].to_f64().unwrap_or(f64::NEG_INFINITY);
            tokens.push(best);
            prev = best;
            if best == EOS {
                let score = rank_hypothesis(sum_logp, tokens.len(), t_trg, 0.0)?;
                tokens.pop();
                return Ok(Translation { tokens, sum_logp, score, finished: true });
            }
        }
        let score = rank_hypothesis(sum_logp, tokens.len(), t_trg, 0.0)?;
        Ok(Translation { tokens, sum_logp, score, finished: false })
    }
}

/// Highest score first; ties go to the lexicographically lower ids.
fn sort_hypotheses<T>(pool: &mut [Hypothesis<T>]) {
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

impl<T: Scalar> Parameters<T> for Seq2Seq<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("src_embed".into(), &self.src_embed);
        f("tgt_embed".into(), &self.tgt_embed);
        for (l, layer) in self.encoder.iter().enumerate() {
            layer.visit(&mut |n, t| f(format!("encoder.layer{l}.{n}"), t));
        }
        for (l, (layer, p)) in self.decoder.iter().zip(&self.projections).enumerate() {
            layer.visit(&mut |n, t| f(format!("decoder.layer{l}.{n}"), t));
            f(format!("decoder.layer{l}.v_z"), &p.v_z);
            f(format!("decoder.layer{l}.v_f"), &p.v_f);
            f(format!("decoder.layer{l}.v_o"), &p.v_o);
        }
        f("attention.w_k".into(), &self.w_k);
        f("attention.w_c".into(), &self.w_c);
        f("output.w".into(), &self.out_w);
        f("output.b".into(), &self.out_b);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f("src_embed".into(), &mut self.src_embed);
        f("tgt_embed".into(), &mut self.tgt_embed);
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&mut |n, t| f(format!("encoder.layer{l}.{n}"), t));
        }
        for (l, (layer, p)) in self.decoder.iter_mut().zip(self.projections.iter_mut()).enumerate() {
            layer.visit_mut(&mut |n, t| f(format!("decoder.layer{l}.{n}"), t));
            f(format!("decoder.layer{l}.v_z"), &mut p.v_z);
            f(format!("decoder.layer{l}.v_f"), &mut p.v_f);
            f(format!("decoder.layer{l}.v_o"), &mut p.v_o);
        }
        f("attention.w_k".into(), &mut self.w_k);
        f("attention.w_c".into(), &mut self.w_c);
        f("output.w".into(), &mut self.out_w);
        f("output.b".into(), &mut self.out_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qrnn::compute_gates;

    fn config() -> Seq2SeqConfig {
        Seq2SeqConfig {
            vocab_size: 9,
            embed_dim: 4,
            hidden_dim: 5,
            layers: 2,
            encoder_first_width: 3,
            encoder_width: 2,
            decoder_width: 2,
            reverse_source: true,
        }
    }

    fn model(seed: u64) -> Seq2Seq<f64> {
        Seq2Seq::new(config(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn rank_examples() {
        for (t, tt) in [(1, 5), (4, 6), (9, 3)] {
            assert_eq!(rank_hypothesis(-2.5, t, tt, 0.0).unwrap(), -2.5);
        }
        let f = rank_hypothesis(1.0, 4, 6, 1.0).unwrap();
        assert!((f - 7.0 / 4.0).abs() < 1e-12);
        assert!((rank_hypothesis(1.0, 10, 10, 0.6).unwrap() - 1.06).abs() < 1e-12);
        assert_eq!(rank_hypothesis(-3.0, 8, 6, 0.6).unwrap(), -3.0);
        assert!(matches!(rank_hypothesis(-1.0, 0, 6, 0.6), Err(Error::Argument(_))));
    }

    #[test]
    fn single_token_source() {
        let m = model(0);
        let e = m.encode(&[5]).unwrap();
        assert_eq!(e.states.shape(), &[1, 5]);
        assert_eq!(e.states.data(), e.finals[1].data());
        assert_eq!(e.finals.len(), 2);
    }

    #[test]
    fn reversal_and_palindromes() {
        let mut a = model(1);
        let mut b = a.clone();
        a.config.reverse_source = false;
        b.config.reverse_source = true;
        let asym = [4, 5, 6, 7];
        assert_ne!(a.encode(&asym).unwrap(), b.encode(&asym).unwrap());
        let pal = [4, 5, 6, 5, 4];
        assert_eq!(a.encode(&pal).unwrap(), b.encode(&pal).unwrap());
    }

    #[test]
    fn unknown_id_is_vocabulary_error() {
        assert!(matches!(model(0).encode(&[4, 99]), Err(Error::Vocabulary(_))));
        assert!(matches!(model(0).encode(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn supplement_reductions() {
        let m = model(2);
        let layer = &m.decoder[0];
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut Rng::new(3));
        let plain = compute_gates(&x, &layer.banks, &layer.config).unwrap();
        let h = Tensor::uniform(&[5], -1.0, 1.0, &mut Rng::new(4));
        let zero_v = DecoderProjections {
            v_z: Tensor::zeros(&[5, 5]),
            v_f: Tensor::zeros(&[5, 5]),
            v_o: Tensor::zeros(&[5, 5]),
        };
        assert_eq!(decoder_conv_supplemented(&x, layer, &zero_v, &h).unwrap(), plain);
        let zero_h = Tensor::zeros(&[5]);
        assert_eq!(decoder_conv_supplemented(&x, layer, &m.projections[0], &zero_h).unwrap(), plain);
    }

    #[test]
    fn supplement_matches_compositional_oracle() {
        let m = model(3);
        let layer = &m.decoder[0];
        let p = &m.projections[0];
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut Rng::new(3));
        let h = Tensor::uniform(&[5], -1.0, 1.0, &mut Rng::new(4));
        let g = decoder_conv_supplemented(&x, layer, p, &h).unwrap();
        let banks = &layer.banks;
        use crate::qrnn::{masked_conv1d, Gate};
        for (gate, v, out) in [(Gate::Z, &p.v_z, &g.z), (Gate::F, &p.v_f, &g.f), (Gate::O, &p.v_o, g.o.as_ref().unwrap())] {
            let conv = masked_conv1d(&x, banks.weight(gate).unwrap(), banks.bias(gate).unwrap(), Masking::Masked).unwrap();
            for t in 0..6 {
                for j in 0..5 {
                    let add: f64 = (0..5).map(|a| h.get(&[a]) * v.get(&[a, j])).sum();
                    let pre = conv.get(&[t, j]) + add;
                    let act = if gate == Gate::Z { pre.tanh() } else { 1.0 / (1.0 + (-pre).exp()) };
                    assert!((out.get(&[t, j]) - act).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_state_reaches_every_step() {
        let m = model(4);
        let layer = &m.decoder[0];
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut Rng::new(3));
        let h1 = Tensor::uniform(&[5], -1.0, 1.0, &mut Rng::new(4));
        let h2 = h1.map(|v| v + 0.1);
        let a = decoder_conv_supplemented(&x, layer, &m.projections[0], &h1).unwrap();
        let b = decoder_conv_supplemented(&x, layer, &m.projections[0], &h2).unwrap();
        for t in 0..6 {
            assert_ne!(a.z.row(t), b.z.row(t));
            assert_ne!(a.f.row(t), b.f.row(t));
        }
    }

    fn attention_oracle(c: &Tensor<f64>, he: &Tensor<f64>, o: &Tensor<f64>, wk: &Tensor<f64>, wc: &Tensor<f64>) -> Tensor<f64> {
        let (t, m) = (c.shape()[0], c.shape()[1]);
        let s = he.shape()[0];
        let mut out = Tensor::zeros(&[t, m]);
        for ti in 0..t {
            let scores: Vec<f64> = (0..s).map(|si| (0..m).map(|j| c.get(&[ti, j]) * he.get(&[si, j])).sum()).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|v| (v - mx).exp()).sum();
            let a: Vec<f64> = scores.iter().map(|v| (v - mx).exp() / z).collect();
            let k: Vec<f64> = (0..m).map(|j| (0..s).map(|si| a[si] * he.get(&[si, j])).sum()).collect();
            for j in 0..m {
                let p: f64 = (0..m).map(|i| k[i] * wk.get(&[i, j]) + c.get(&[ti, i]) * wc.get(&[i, j])).sum();
                out.set(&[ti, j], o.get(&[ti, j]) * p);
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let c = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let he = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let o = Tensor::uniform(&[3, 2], 0.0, 1.0, &mut rng);
        let wk = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let wc = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let h = attend(&c, &he, &o, &wk, &wc).unwrap();
        let r = attention_oracle(&c, &he, &o, &wk, &wc);
        for (a, b) in h.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_special_cases() {
        let mut rng = Rng::new(6);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let zero = Tensor::zeros(&[3, 3]);
        let ones = Tensor::ones(&[2, 3]);
        // W_c = 0, W_k = I, o = 1 exposes k_t directly.
        let he1 = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
        let c = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let k = attend(&c, &he1, &ones, &eye, &zero).unwrap();
        for t in 0..2 {
            assert_eq!(k.row(t), he1.row(0));
        }
        let he = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let k = attend(&Tensor::zeros(&[2, 3]), &he, &ones, &eye, &zero).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|s| he.get(&[s, j])).sum::<f64>() / 4.0;
            assert!((k.get(&[1, j]) - mean).abs() < 1e-12);
        }
        let (_, cache) = attend_with_cache(&c, &he, &ones, &eye, &zero).unwrap();
        for row in cache.weights().data().chunks(4) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_rows_are_distributions_and_causal() {
        let m = model(7);
        let src = [4, 5, 6];
        let lp = m.decode_training(&src, &[7, 8, 4, 5]).unwrap();
        assert_eq!(lp.shape(), &[5, 9]);
        for t in 0..5 {
            let s: f64 = lp.row(t).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let lp2 = m.decode_training(&src, &[7, 8, 6, 6]).unwrap();
        // Targets 0..=1 feed rows 1..=2; rows 0..=2 must be unchanged.
        assert_eq!(&lp.data()[..27], &lp2.data()[..27]);
        assert_ne!(&lp.data()[27..], &lp2.data()[27..]);
    }

    #[test]
    fn incremental_matches_batch_decoding() {
        let m = model(8);
        let src = [4, 5, 6, 7, 8];
        let tgt = [8, 7, 6, 5];
        let a = m.decode_training(&src, &tgt).unwrap();
        let b = m.decode_incremental(&src, &tgt).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_training_matches_single() {
        let m = model(9);
        let (lp, _) = m.forward_batch(&[4, 5, 6, 7, 8, 4], &[5, 5, 6, 6], 2).unwrap();
        let a = m.decode_training(&[7, 8, 4], &[6, 6]).unwrap();
        for (x, y) in lp.data()[27..].iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..5 {
            let m = model(seed);
            let src = [4, 5, 6, 7];
            let g = m.greedy_decode(&src, 12).unwrap();
            let b = m.beam_search(&src, 1, 0.0, 12).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.finished, b.finished);
        }
    }

    #[test]
    fn unfinished_search_returns_max_len() {
        let mut m = model(1);
        // Forbid EOS.
        m.out_b.set(&[EOS], -1e9);
        let r = m.beam_search(&[4, 5], 3, 0.6, 7).unwrap();
        assert!(!r.finished);
        assert_eq!(r.tokens.len(), 7);
    }

    #[test]
    fn beam_search_argument_errors() {
        let m = model(0);
        assert!(m.beam_search(&[], 2, 0.0, 5).is_err());
        assert!(m.beam_search(&[4], 0, 0.0, 5).is_err());
    }
}
