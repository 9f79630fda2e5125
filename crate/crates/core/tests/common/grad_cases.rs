//! Gradient checks shared by the core test suite and the acceptance gate.
//! Each case panics with the offending element on mismatch.

use qrnn::lstm::LstmLayer;
use qrnn::models::{Classifier, ClassifierConfig, LanguageModel, LmConfig, Readout};
use qrnn::qrnn::{ForwardArgs, LayerState, Masking, Pooling, QrnnConfig, QrnnLayer};
use qrnn::regularization::{QrnnStack, StackConfig};
use qrnn::seq2seq::{attend_with_cache, Seq2Seq, Seq2SeqConfig};
use qrnn::train::softmax_nll;
use qrnn::{Parameters, Rng, Tensor};

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (analytic - numeric).abs() <= ABS_FLOOR
    } else {
        (analytic - numeric).abs() / scale <= REL_TOL
    }
}

/// Element indices to probe: all of them for small tensors, a seeded
/// sample otherwise.
fn probes(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= 48 {
        (0..len).collect()
    } else {
        (0..48).map(|_| rng.below(len)).collect()
    }
}

fn central(x: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + EPS;
    let up = f(x);
    x[i] = orig - EPS;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * EPS)
}

/// Checks `analytic` against finite differences of `f` around `x`.
fn check_input(label: &str, x: &Tensor<f64>, analytic: &[f64], mut f: impl FnMut(&Tensor<f64>) -> f64) {
    assert_eq!(x.len(), analytic.len(), "{label}: gradient size");
    let mut rng = Rng::new(17);
    let shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    for i in probes(data.len(), &mut rng) {
        let num = central(&mut data, i, &mut |d| f(&Tensor::new(&shape, d.to_vec()).unwrap()));
        assert!(close(analytic[i], num), "{label}[{i}]: analytic {} vs numeric {}", analytic[i], num);
    }
}

/// Checks every parameter tensor of `model` against `grads`.
fn check_params<P: Parameters<f64> + Clone>(label: &str, model: &P, grads: &P, loss: impl FnMut(&P) -> f64) {
    check_params_within(label, model, grads, 0.0, loss)
}

/// Whole models: a difference quotient of a loss of size `|L|` carries
/// roundoff of order `ε_mach·|L|/ε`, which swamps the relative budget for
/// parameters buried deep in the network. That bound is added as slack.
fn check_model<P: Parameters<f64> + Clone>(label: &str, model: &P, grads: &P, mut loss: impl FnMut(&P) -> f64) {
    let slack = 4.0 * f64::EPSILON * loss(model).abs().max(1.0) / EPS;
    check_params_within(label, model, grads, slack, loss)
}

fn check_params_within<P: Parameters<f64> + Clone>(
    label: &str,
    model: &P,
    grads: &P,
    slack: f64,
    mut loss: impl FnMut(&P) -> f64,
) {
    let mut rng = Rng::new(23);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.params().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(names.len(), analytic.len());
    let mut probe = model.clone();
    for (p, name) in names.iter().enumerate() {
        let len = analytic[p].len();
        for i in probes(len, &mut rng) {
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + EPS;
            let up = loss(&probe);
            probe.params_mut()[p].data_mut()[i] = orig - EPS;
            let down = loss(&probe);
            probe.params_mut()[p].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * EPS);
            let a = analytic[p][i];
            let ok = close(a, num) || (a - num).abs() <= slack + REL_TOL * a.abs().max(num.abs());
            assert!(ok, "{label}: {name}[{i}] analytic {a} vs numeric {num}");
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn qrnn_layer_all_modes_and_widths() {
    let (batch, steps, n, m) = (2, 6, 3, 4);
    for pooling in [Pooling::F, Pooling::Fo, Pooling::Ifo] {
        for masking in [Masking::Masked, Masking::Unmasked] {
            for k in [1, 2, 3, 6] {
                let label = format!("{pooling:?}/{masking:?}/k={k}");
                let mut rng = Rng::new(k as u64);
                let cfg = QrnnConfig::new(k, n, m, pooling).masking(masking);
                let layer = QrnnLayer::<f64>::new(cfg, &mut rng).unwrap();
                let x = Tensor::uniform(&[batch, steps, n], -1.0, 1.0, &mut rng);
                let r = Tensor::uniform(&[batch, steps, m], -1.0, 1.0, &mut rng);
                let (_, cache) = layer.forward(&x, &mut rng, true).unwrap();
                let g = layer.backward(&cache.unwrap(), &r).unwrap();
                let loss = |l: &QrnnLayer<f64>, x: &Tensor<f64>| dot(&l.forward(x, &mut Rng::new(0), false).unwrap().0, &r);
                check_input(&format!("{label} dx"), &x, g.dx.data(), |x| loss(&layer, x));
                check_params(&label, &layer, &QrnnLayer::from_banks(cfg, g.banks).unwrap(), |l| loss(l, &x));
            }
        }
    }
}

pub fn qrnn_layer_with_zoneout_state_and_supplement() {
    let (batch, steps, n, m, k) = (2, 4, 3, 3, 2);
    for pooling in [Pooling::F, Pooling::Fo, Pooling::Ifo] {
        let mut rng = Rng::new(5);
        let cfg = QrnnConfig::new(k, n, m, pooling).zoneout(0.4);
        let layer = QrnnLayer::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[batch, steps, n], -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(&[batch, steps, m], -1.0, 1.0, &mut rng);
        let supp = Tensor::uniform(&[batch, pooling.gate_count() * m], -0.5, 0.5, &mut rng);
        let mut state = LayerState::zeros(batch, &cfg);
        state.c = Tensor::<f64>::uniform(&[batch * m], -1.0, 1.0, &mut rng).into_data();
        state.history = Tensor::<f64>::uniform(&[batch * (k - 1) * n], -1.0, 1.0, &mut rng).into_data();
        let mask_seed = 99;

        let run = |l: &QrnnLayer<f64>, x: &Tensor<f64>, s: &Tensor<f64>, st: &LayerState<f64>| {
            let mut zr = Rng::new(mask_seed);
            let args = ForwardArgs { state: Some(st), supplement: Some(s), zoneout_rng: Some(&mut zr) };
            l.forward_with(x, args).unwrap()
        };
        let (_, cache) = run(&layer, &x, &supp, &state);
        assert!(cache.keep_mask().unwrap().data().contains(&0.0), "zoneout must drop something");
        let g = layer.backward(&cache, &r).unwrap();
        let label = format!("{pooling:?}+zoneout");
        check_input(&format!("{label} dx"), &x, g.dx.data(), |x| dot(&run(&layer, x, &supp, &state).0, &r));
        check_input(&format!("{label} dsupp"), &supp, g.d_supplement.as_ref().unwrap().data(), |s| {
            dot(&run(&layer, &x, s, &state).0, &r)
        });
        let c0 = Tensor::new(&[batch * m], state.c.clone()).unwrap();
        check_input(&format!("{label} dc0"), &c0, &g.dc0, |c| {
            let mut st = state.clone();
            st.c = c.data().to_vec();
            dot(&run(&layer, &x, &supp, &st).0, &r)
        });
        check_params(&label, &layer, &QrnnLayer::from_banks(cfg, g.banks).unwrap(), |l| dot(&run(l, &x, &supp, &state).0, &r));
    }
}

pub fn lstm_layer() {
    let (batch, steps, n, m) = (2, 5, 3, 4);
    let mut rng = Rng::new(3);
    let layer = LstmLayer::<f64>::new(n, m, 1.0, &mut rng).unwrap();
    let x = Tensor::uniform(&[batch, steps, n], -1.0, 1.0, &mut rng);
    let h0 = Tensor::uniform(&[batch, m], -0.5, 0.5, &mut rng);
    let c0 = Tensor::uniform(&[batch, m], -0.5, 0.5, &mut rng);
    let r = Tensor::uniform(&[batch, steps, m], -1.0, 1.0, &mut rng);
    let loss = |l: &LstmLayer<f64>, x: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>| {
        dot(&l.forward(x, Some(h), Some(c)).unwrap().0, &r)
    };
    let (_, cache) = layer.forward(&x, Some(&h0), Some(&c0)).unwrap();
    let g = layer.backward(&cache, &r).unwrap();
    check_input("lstm dx", &x, g.dx.data(), |x| loss(&layer, x, &h0, &c0));
    check_input("lstm dh0", &h0, &g.dh0, |h| loss(&layer, &x, h, &c0));
    check_input("lstm dc0", &c0, &g.dc0, |c| loss(&layer, &x, &h0, c));
    check_params("lstm", &layer, &g.params, |l| loss(l, &x, &h0, &c0));
}

pub fn attention() {
    let (b, t, s, m) = (2, 3, 4, 3);
    let mut rng = Rng::new(8);
    let c = Tensor::uniform(&[b, t, m], -1.0, 1.0, &mut rng);
    let o = Tensor::uniform(&[b, t, m], 0.1, 0.9, &mut rng);
    let he = Tensor::uniform(&[b, s, m], -1.0, 1.0, &mut rng);
    let wk = Tensor::uniform(&[m, m], -1.0, 1.0, &mut rng);
    let wc = Tensor::uniform(&[m, m], -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(&[b, t, m], -1.0, 1.0, &mut rng);
    let (_, cache) = attend_with_cache(&c, &he, &o, &wk, &wc).unwrap();
    let g = cache.backward(&wk, &wc, &r).unwrap();
    let f = |c: &Tensor<f64>, he: &Tensor<f64>, o: &Tensor<f64>, wk: &Tensor<f64>, wc: &Tensor<f64>| {
        dot(&attend_with_cache(c, he, o, wk, wc).unwrap().0, &r)
    };
    check_input("attention dc", &c, g.dc.data(), |x| f(x, &he, &o, &wk, &wc));
    check_input("attention dh_enc", &he, g.dh_enc.data(), |x| f(&c, x, &o, &wk, &wc));
    check_input("attention do", &o, g.d_o.data(), |x| f(&c, &he, x, &wk, &wc));
    check_input("attention dW_k", &wk, g.dw_k.data(), |x| f(&c, &he, &o, x, &wc));
    check_input("attention dW_c", &wc, g.dw_c.data(), |x| f(&c, &he, &o, &wk, x));
}

pub fn seq2seq_all_parameters() {
    let cfg = Seq2SeqConfig {
        vocab_size: 9,
        embed_dim: 3,
        hidden_dim: 4,
        layers: 2,
        encoder_first_width: 3,
        encoder_width: 2,
        decoder_width: 2,
        reverse_source: true,
    };
    let model = Seq2Seq::<f64>::new(cfg, &mut Rng::new(4)).unwrap();
    let src = [4, 5, 6, 7, 8, 4, 6, 5];
    let tgt = [5, 6, 7, 8, 8, 7];
    let (_, grads) = model.loss(&src, &tgt, 2, true).unwrap();
    check_model("seq2seq", &model, &grads.unwrap(), |m| m.loss(&src, &tgt, 2, false).unwrap().0);
}

pub fn fused_softmax_nll() {
    let mut rng = Rng::new(6);
    let logits = Tensor::<f64>::uniform(&[5, 7], -2.0, 2.0, &mut rng);
    let targets = [3, 0, 6, 1, 0];
    let (_, d) = softmax_nll(&logits, &targets, Some(0)).unwrap();
    check_input("nll", &logits, d.data(), |l| softmax_nll(l, &targets, Some(0)).unwrap().0);
    assert!(d.row(1).iter().all(|&v| v == 0.0), "padded rows carry no gradient");
}

fn stack_config(dense: bool) -> StackConfig {
    StackConfig {
        input_dim: 3,
        hidden_dim: 4,
        filter_widths: vec![2, 1, 3],
        pooling: Pooling::Fo,
        masking: Masking::Masked,
        zoneout: 0.3,
        dropout: 0.25,
        dense,
    }
}

pub fn regularized_stacks() {
    for dense in [false, true] {
        let mut rng = Rng::new(12);
        let stack = QrnnStack::<f64>::new(stack_config(dense), &mut rng).unwrap();
        let e = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let run = |s: &QrnnStack<f64>, e: &Tensor<f64>| s.forward(e, None, &mut Rng::new(77), true).unwrap();
        let (_, cache) = run(&stack, &e);
        let (de, g) = stack.backward(&cache, &r).unwrap();
        let label = if dense { "dense stack" } else { "stack" };
        check_input(&format!("{label} dE"), &e, de.data(), |e| dot(&run(&stack, e).0, &r));
        check_params(label, &stack, &g, |s| dot(&run(s, &e).0, &r));
    }
}

pub fn language_model_and_classifier() {
    let lm_cfg = LmConfig { vocab_size: 7, stack: stack_config(false) };
    let lm = LanguageModel::<f64>::new(lm_cfg, &mut Rng::new(1)).unwrap();
    let inputs = [4, 5, 6, 1, 2, 3, 4, 5];
    let targets = [5, 6, 1, 2, 3, 4, 5, 6];
    let states = lm.initial_states(2);
    let run = |m: &LanguageModel<f64>, g: bool| m.step(&inputs, &targets, 2, Some(&states), &mut Rng::new(5), true, g).unwrap();
    let grads = run(&lm, true).grads.unwrap();
    check_model("language model", &lm, &grads, |m| run(m, false).loss);

    for readout in [Readout::Mean, Readout::Final] {
        let cfg = ClassifierConfig { vocab_size: 7, classes: 2, readout, stack: stack_config(true) };
        let clf = Classifier::<f64>::new(cfg, &mut Rng::new(2)).unwrap();
        let docs: [&[usize]; 3] = [&[4, 5, 6], &[6, 5, 4, 3, 2], &[3]];
        let labels = [1, 0, 1];
        let run = |c: &Classifier<f64>, g: bool| c.step(&docs, &labels, &mut Rng::new(8), true, g).unwrap();
        let grads = run(&clf, true).grads.unwrap();
        check_model(&format!("classifier {readout:?}"), &clf, &grads, |c| run(c, false).loss);
    }
}

/// Every case, in the order the acceptance gate reports them.
pub const CASES: &[(&str, fn())] = &[
    ("qrnn layer, all modes and widths", qrnn_layer_all_modes_and_widths),
    ("qrnn layer with zoneout, state and supplement", qrnn_layer_with_zoneout_state_and_supplement),
    ("lstm layer", lstm_layer),
    ("attention", attention),
    ("seq2seq parameters", seq2seq_all_parameters),
    ("fused softmax nll", fused_softmax_nll),
    ("regularized stacks", regularized_stacks),
    ("language model and classifier", language_model_and_classifier),
];
