//! Zoneout on forget gates, inverted dropout between layers, and stacks of
//! QRNN layers with optional dense (concatenative skip) connections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::qrnn::{ForwardArgs, LayerCache, LayerState, Masking, Pooling, QrnnConfig, QrnnLayer};
use crate::tensor::{concat_channels, split_channels, Rng, Scalar, Tensor};

fn check_rate(p: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("{what} rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Keep mask for zoneout: 1 with probability `1 - p`, independently per
/// element.
pub(crate) fn zoneout_keep_mask<T: Scalar>(rng: &mut Rng, len: usize, p: f64) -> Result<Vec<T>> {
    check_rate(p, "zoneout")?;
    let keep = 1.0 - p;
    Ok((0..len).map(|_| if rng.unit() < keep { T::one() } else { T::zero() }).collect())
}

/// `F' = 1 - mask ⊙ (1 - F)`, evaluated as a select so kept entries are
/// bit-identical to `F` and zoned entries are exactly 1.
pub(crate) fn apply_zoneout<T: Scalar>(f: &[T], keep: &[T]) -> Vec<T> {
    f.iter().zip(keep).map(|(&f, &k)| if k == T::zero() { T::one() } else { f }).collect()
}

/// Zoneout on a forget gate: during training each element is replaced by 1
/// with probability `p`. There is no rescaling; inference leaves `F` alone.
pub fn zoneout_gate<T: Scalar>(f: &Tensor<T>, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
    check_rate(p, "zoneout")?;
    if !training || p == 0.0 {
        return Ok(f.clone());
    }
    let keep = zoneout_keep_mask(rng, f.len(), p)?;
    Tensor::new(f.shape(), apply_zoneout(f.data(), &keep))
}

/// Samples an inverted-dropout multiplier: 0 with probability `p`, else
/// `1 / (1 - p)`. `None` means identity.
fn dropout_scale<T: Scalar>(rng: &mut Rng, len: usize, p: f64, training: bool) -> Result<Option<Vec<T>>> {
    check_rate(p, "dropout")?;
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 - p;
    let s = T::of(1.0 / keep);
    Ok(Some((0..len).map(|_| if rng.unit() < keep { s } else { T::zero() }).collect()))
}

fn scaled<T: Scalar>(x: &Tensor<T>, scale: &Option<Vec<T>>) -> Tensor<T> {
    match scale {
        None => x.clone(),
        Some(s) => {
            let data = x.data().iter().zip(s).map(|(&v, &m)| v * m).collect();
            Tensor::new(x.shape(), data).expect("same shape")
        }
    }
}

/// Inverted dropout: during training entries are zeroed with probability
/// `p` and survivors scaled by `1/(1-p)`; inference is the identity.
pub fn interlayer_dropout<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
    let scale = dropout_scale(rng, x.len(), p, training)?;
    Ok(scaled(x, &scale))
}

/// Layout of a stack of QRNN layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// One filter width per layer.
    pub filter_widths: Vec<usize>,
    pub pooling: Pooling,
    pub masking: Masking,
    pub zoneout: f64,
    /// Dropout applied to the embeddings and to every layer output.
    pub dropout: f64,
    /// Feed each layer the concatenation of the input and all earlier
    /// layer outputs.
    pub dense: bool,
}

impl StackConfig {
    pub fn layers(&self) -> usize {
        self.filter_widths.len()
    }

    /// Input width of layer `l` (0-based).
    pub fn layer_input_dim(&self, l: usize) -> usize {
        match (l, self.dense) {
            (0, _) => self.input_dim,
            (_, true) => self.input_dim + l * self.hidden_dim,
            (_, false) => self.hidden_dim,
        }
    }

    pub fn layer_config(&self, l: usize) -> QrnnConfig {
        QrnnConfig {
            filter_width: self.filter_widths[l],
            input_dim: self.layer_input_dim(l),
            hidden_dim: self.hidden_dim,
            pooling: self.pooling,
            masking: self.masking,
            zoneout: self.zoneout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QrnnStack<T> {
    pub config: StackConfig,
    pub layers: Vec<QrnnLayer<T>>,
}

/// Forward record of a stack, sufficient for its backward pass.
#[derive(Clone, Debug)]
pub struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
    /// Dropout multipliers of block 0 (input) and blocks 1..=L (outputs).
    scales: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> StackCache<T> {
    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }

    pub fn final_states(&self) -> Vec<LayerState<T>> {
        self.layers.iter().map(LayerCache::final_state).collect()
    }
}

impl<T: Scalar> QrnnStack<T> {
    pub fn new(config: StackConfig, rng: &mut Rng) -> Result<Self> {
        if config.layers() == 0 {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        check_rate(config.dropout, "dropout")?;
        let layers = (0..config.layers())
            .map(|l| QrnnLayer::new(config.layer_config(l), rng))
            .collect::<Result<_>>()?;
        Ok(QrnnStack { config, layers })
    }

    /// Assembles a stack from existing layers, validating the dimension
    /// chain.
    pub fn from_layers(config: StackConfig, layers: Vec<QrnnLayer<T>>) -> Result<Self> {
        if layers.len() != config.layers() {
            return Err(Error::Config(format!(
                "{} layers given, configuration lists {}",
                layers.len(),
                config.layers()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.config != config.layer_config(l) {
                return Err(Error::Config(format!(
                    "layer {} has input width {} and hidden size {}, the stack expects {} and {}",
                    l + 1,
                    layer.config.input_dim,
                    layer.config.hidden_dim,
                    config.layer_input_dim(l),
                    config.hidden_dim
                )));
            }
        }
        Ok(QrnnStack { config, layers })
    }

    pub fn initial_states(&self, batch: usize) -> Vec<LayerState<T>> {
        self.layers.iter().map(|l| LayerState::zeros(batch, &l.config)).collect()
    }

    /// Runs the stack over `e` (`[T, n]` or `[B, T, n]`) and returns the
    /// last layer's output (after dropout when training).
    pub fn forward(
        &self,
        e: &Tensor<T>,
        states: Option<&[LayerState<T>]>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Tensor<T>, StackCache<T>)> {
        let cfg = &self.config;
        if let Some(s) = states {
            if s.len() != self.layers.len() {
                return Err(Error::State(format!("{} carried states for {} layers", s.len(), self.layers.len())));
            }
        }
        let mut scales = Vec::with_capacity(self.layers.len() + 1);
        let scale = dropout_scale(rng, e.len(), cfg.dropout, training)?;
        let mut blocks = vec![scaled(e, &scale)];
        scales.push(scale);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if cfg.dense && l > 0 {
                concat_channels(&blocks.iter().collect::<Vec<_>>())?
            } else {
                blocks[l].clone()
            };
            let args = ForwardArgs {
                state: states.map(|s| &s[l]),
                zoneout_rng: training.then_some(&mut *rng),
                ..Default::default()
            };
            let (h, cache) = layer.forward_with(&input, args)?;
            caches.push(cache);
            let scale = dropout_scale(rng, h.len(), cfg.dropout, training)?;
            blocks.push(scaled(&h, &scale));
            scales.push(scale);
        }
        let out = blocks.pop().unwrap();
        Ok((out, StackCache { layers: caches, scales }))
    }

    /// Backward from `∂L/∂output`; returns `∂L/∂e` and parameter
    /// gradients shaped like `self`. Gradients flowing into carried
    /// states are dropped (truncated backpropagation).
    pub fn backward(&self, cache: &StackCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, QrnnStack<T>)> {
        let n_layers = self.layers.len();
        if cache.layers.len() != n_layers {
            return Err(Error::State("stack cache does not match stack depth".into()));
        }
        // Gradients w.r.t. the post-dropout blocks.
        let mut dblocks: Vec<Option<Tensor<T>>> = vec![None; n_layers + 1];
        dblocks[n_layers] = Some(dout.clone());
        let mut grads = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let dpost = dblocks[l + 1].take().expect("every layer output is consumed");
            let dh = scaled(&dpost, &cache.scales[l + 1]);
            let g = self.layers[l].backward(&cache.layers[l], &dh)?;
            if self.config.dense && l > 0 {
                let mut widths = vec![self.config.input_dim];
                widths.extend(std::iter::repeat_n(self.config.hidden_dim, l));
                for (j, part) in split_channels(&g.dx, &widths)?.into_iter().enumerate() {
                    accumulate(&mut dblocks[j], part)?;
                }
            } else {
                accumulate(&mut dblocks[l], g.dx)?;
            }
            grads.push(QrnnLayer { config: self.layers[l].config, banks: g.banks });
        }
        grads.reverse();
        let de = scaled(&dblocks[0].take().expect("input gradient"), &cache.scales[0]);
        Ok((de, QrnnStack { config: self.config.clone(), layers: grads }))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Parameters<T> for QrnnStack<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |n, t| f(format!("layer{l}.{n}"), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |n, t| f(format!("layer{l}.{n}"), t));
        }
    }
}
