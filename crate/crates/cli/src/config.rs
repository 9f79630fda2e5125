//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Resolution order is built-in defaults, then the file, then `--set`
//! overrides. Every key is known up front; anything else is rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qrnn::data::Level;
use qrnn::models::Readout;
use qrnn::qrnn::{Masking, Pooling};
use qrnn::train::{OptimizerKind, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub embed: usize,
    /// One width for every layer, or one per layer.
    pub k: Vec<usize>,
    pub pooling: Pooling,
    pub masking: Masking,
    pub dense: bool,
    pub readout: Readout,
    pub classes: usize,
    pub encoder_first_k: usize,
    pub encoder_k: usize,
    pub decoder_k: usize,
    pub reverse_source: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Tail fraction of `train` held out when `valid` is absent.
    pub valid_fraction: f64,
    pub src_train: Option<PathBuf>,
    pub tgt_train: Option<PathBuf>,
    pub src_valid: Option<PathBuf>,
    pub tgt_valid: Option<PathBuf>,
    pub level: Level,
    /// 0 keeps every symbol.
    pub vocab_size: usize,
    pub embeddings: Option<PathBuf>,
    pub max_chars: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSection {
    pub beam: usize,
    pub alpha: f64,
    /// 0 means twice the source length plus ten.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Evaluation stream count for language models.
    pub eval_batch: usize,
    pub data: DataSection,
    pub decode: DecodeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection { seed: 1, out: PathBuf::from("runs/out"), threads: 1, dtype: DType::F32 },
            model: ModelSection {
                layers: 2,
                hidden: 64,
                embed: 64,
                k: vec![2],
                pooling: Pooling::Fo,
                masking: Masking::Masked,
                dense: false,
                readout: Readout::Mean,
                classes: 2,
                encoder_first_k: 6,
                encoder_k: 2,
                decoder_k: 2,
                reverse_source: true,
            },
            train: TrainConfig::default(),
            eval_batch: 1,
            data: DataSection {
                train: None,
                valid: None,
                test: None,
                valid_fraction: 0.1,
                src_train: None,
                tgt_train: None,
                src_valid: None,
                tgt_valid: None,
                level: Level::Char,
                vocab_size: 0,
                embeddings: None,
                max_chars: 300,
            },
            decode: DecodeSection { beam: 8, alpha: 0.6, max_len: 0 },
        }
    }
}

fn parse<V: FromStr>(v: &str, what: &str) -> Result<V, String> {
    v.parse().map_err(|_| format!("expected {what}, got '{v}'"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::F => "f",
        Pooling::Fo => "fo",
        Pooling::Ifo => "ifo",
    }
}

fn parse_masking(v: &str) -> Result<Masking, String> {
    match v {
        "masked" => Ok(Masking::Masked),
        "unmasked" => Ok(Masking::Unmasked),
        _ => Err(format!("expected masked or unmasked, got '{v}'")),
    }
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        let t = &mut self.train;
        match key {
            "run.seed" => self.run.seed = parse(v, "an unsigned integer")?,
            "run.out" => self.run.out = PathBuf::from(v),
            "run.threads" => self.run.threads = parse(v, "a thread count")?,
            "run.dtype" => {
                self.run.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(format!("expected f32 or f64, got '{v}'")),
                }
            }
            "model.layers" => self.model.layers = parse(v, "a layer count")?,
            "model.hidden" => self.model.hidden = parse(v, "a unit count")?,
            "model.embed" => self.model.embed = parse(v, "an embedding size")?,
            "model.k" => {
                self.model.k = v
                    .split(',')
                    .map(|x| parse(x.trim(), "a comma-separated list of filter widths"))
                    .collect::<Result<_, _>>()?
            }
            "model.pooling" => self.model.pooling = v.parse().map_err(|_| format!("expected f, fo or ifo, got '{v}'"))?,
            "model.masking" => self.model.masking = parse_masking(v)?,
            "model.dense" => self.model.dense = parse_bool(v)?,
            "model.readout" => self.model.readout = v.parse().map_err(|_| format!("expected mean or final, got '{v}'"))?,
            "model.classes" => self.model.classes = parse(v, "a class count")?,
            "model.encoder_first_k" => self.model.encoder_first_k = parse(v, "a filter width")?,
            "model.encoder_k" => self.model.encoder_k = parse(v, "a filter width")?,
            "model.decoder_k" => self.model.decoder_k = parse(v, "a filter width")?,
            "model.reverse_source" => self.model.reverse_source = parse_bool(v)?,
            "train.optimizer" => t.optimizer = v.parse().map_err(|_| format!("expected sgd, rmsprop or adam, got '{v}'"))?,
            "train.lr" => t.lr = parse(v, "a number")?,
            "train.flat_epochs" => t.flat_epochs = parse(v, "an epoch count")?,
            "train.decay" => t.decay = parse(v, "a number")?,
            "train.clip" => {
                let c: f64 = parse(v, "a number (0 disables)")?;
                t.max_grad_norm = (c > 0.0).then_some(c);
            }
            "train.l2" => t.l2 = parse(v, "a number")?,
            "train.epochs" => t.epochs = parse(v, "an epoch count")?,
            "train.batch" => t.batch_size = parse(v, "a batch size")?,
            "train.bptt" => t.bptt = parse(v, "a window length")?,
            "train.zoneout" => t.zoneout = parse(v, "a probability")?,
            "train.dropout" => t.dropout = parse(v, "a probability")?,
            "train.eval_batch" => self.eval_batch = parse(v, "a batch size")?,
            "data.train" => self.data.train = parse_path(v),
            "data.valid" => self.data.valid = parse_path(v),
            "data.test" => self.data.test = parse_path(v),
            "data.valid_fraction" => self.data.valid_fraction = parse(v, "a fraction")?,
            "data.src_train" => self.data.src_train = parse_path(v),
            "data.tgt_train" => self.data.tgt_train = parse_path(v),
            "data.src_valid" => self.data.src_valid = parse_path(v),
            "data.tgt_valid" => self.data.tgt_valid = parse_path(v),
            "data.level" => self.data.level = v.parse().map_err(|_| format!("expected char or word, got '{v}'"))?,
            "data.vocab_size" => self.data.vocab_size = parse(v, "a vocabulary size")?,
            "data.embeddings" => self.data.embeddings = parse_path(v),
            "data.max_chars" => self.data.max_chars = parse(v, "a length")?,
            "decode.beam" => self.decode.beam = parse(v, "a beam width")?,
            "decode.alpha" => self.decode.alpha = parse(v, "a number")?,
            "decode.max_len" => self.decode.max_len = parse(v, "a length")?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &self.model;
        let d = &self.data;
        vec![
            ("run.seed", self.run.seed.to_string()),
            ("run.out", self.run.out.display().to_string()),
            ("run.threads", self.run.threads.to_string()),
            ("run.dtype", if self.run.dtype == DType::F32 { "f32" } else { "f64" }.into()),
            ("model.layers", m.layers.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.embed", m.embed.to_string()),
            ("model.k", show_list(&m.k)),
            ("model.pooling", pooling_name(m.pooling).into()),
            ("model.masking", if m.masking == Masking::Masked { "masked" } else { "unmasked" }.into()),
            ("model.dense", m.dense.to_string()),
            ("model.readout", if m.readout == Readout::Mean { "mean" } else { "final" }.into()),
            ("model.classes", m.classes.to_string()),
            ("model.encoder_first_k", m.encoder_first_k.to_string()),
            ("model.encoder_k", m.encoder_k.to_string()),
            ("model.decoder_k", m.decoder_k.to_string()),
            ("model.reverse_source", m.reverse_source.to_string()),
            (
                "train.optimizer",
                match t.optimizer {
                    OptimizerKind::Sgd => "sgd",
                    OptimizerKind::Rmsprop => "rmsprop",
                    OptimizerKind::Adam => "adam",
                }
                .into(),
            ),
            ("train.lr", t.lr.to_string()),
            ("train.flat_epochs", t.flat_epochs.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.clip", t.max_grad_norm.unwrap_or(0.0).to_string()),
            ("train.l2", t.l2.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.bptt", t.bptt.to_string()),
            ("train.zoneout", t.zoneout.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.eval_batch", self.eval_batch.to_string()),
            ("data.train", show_path(&d.train)),
            ("data.valid", show_path(&d.valid)),
            ("data.test", show_path(&d.test)),
            ("data.valid_fraction", d.valid_fraction.to_string()),
            ("data.src_train", show_path(&d.src_train)),
            ("data.tgt_train", show_path(&d.tgt_train)),
            ("data.src_valid", show_path(&d.src_valid)),
            ("data.tgt_valid", show_path(&d.tgt_valid)),
            ("data.level", if d.level == Level::Char { "char" } else { "word" }.into()),
            ("data.vocab_size", d.vocab_size.to_string()),
            ("data.embeddings", show_path(&d.embeddings)),
            ("data.max_chars", d.max_chars.to_string()),
            ("decode.beam", self.decode.beam.to_string()),
            ("decode.alpha", self.decode.alpha.to_string()),
            ("decode.max_len", self.decode.max_len.to_string()),
        ]
    }

    /// The resolved configuration in the input format.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Applies a whole file's text; `origin` names it in diagnostics.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected 'section.key = value'", i + 1)))?;
            self.set(key.trim(), value).map_err(|e| CliError::config(format!("{origin}:{}: {}: {e}", i + 1, key.trim())))?;
        }
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set {assignment}: expected section.key=value")))?;
        self.set(key.trim(), value).map_err(|e| CliError::config(format!("--set {}: {e}", key.trim())))
    }

    /// Defaults ← `path` ← `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        let bad = |s: &str| Err(CliError::config(s.to_string()));
        if m.layers == 0 || m.hidden == 0 || m.embed == 0 {
            return bad("model.layers, model.hidden and model.embed must be positive");
        }
        if m.k.is_empty() || m.k.contains(&0) || (m.k.len() != 1 && m.k.len() != m.layers) {
            return bad("model.k must be one positive width or one per layer");
        }
        if m.classes < 2 {
            return bad("model.classes must be at least 2");
        }
        if m.encoder_first_k == 0 || m.encoder_k == 0 || m.decoder_k == 0 {
            return bad("filter widths must be positive");
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            return bad("data.valid_fraction must lie in [0, 1)");
        }
        if self.decode.beam == 0 {
            return bad("decode.beam must be positive");
        }
        if self.eval_batch == 0 || self.run.threads == 0 {
            return bad("train.eval_batch and run.threads must be positive");
        }
        self.train.validate().map_err(CliError::from)
    }

    /// Per-layer filter widths.
    pub fn widths(&self) -> Vec<usize> {
        if self.model.k.len() == 1 {
            vec![self.model.k[0]; self.model.layers]
        } else {
            self.model.k.clone()
        }
    }
}
