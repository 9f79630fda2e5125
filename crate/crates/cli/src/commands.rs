//! Subcommand implementations. The training entry points are public so the
//! acceptance suite can drive whole runs without spawning processes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use qrnn::bench::{self, GridSpec, LayerKind, Mode};
use qrnn::checkpoint;
use qrnn::data::{self, Level, Vocabulary};
use qrnn::models::{
    self, Classifier, ClassifierConfig, EpochRecord, LanguageModel, LmConfig,
};
use qrnn::qrnn::{dump_hidden_states, Masking, Pooling};
use qrnn::regularization::StackConfig;
use qrnn::seq2seq::{Seq2Seq, Seq2SeqConfig};
use qrnn::tensor::with_threads;
use qrnn::train::{corpus_bleu, perplexity, TrainConfig};
use qrnn::{Parameters, Rng, Scalar};

use crate::config::{DType, RunConfig};
use crate::{CliError, Command, Result};

/// What a checkpoint holds; serialized as its config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum ModelMeta {
    Lm { dtype: String, config: LmConfig },
    Classify { dtype: String, config: ClassifierConfig },
    Translate { dtype: String, config: Seq2SeqConfig },
}

impl ModelMeta {
    fn dtype(&self) -> &str {
        match self {
            ModelMeta::Lm { dtype, .. } | ModelMeta::Classify { dtype, .. } | ModelMeta::Translate { dtype, .. } => dtype,
        }
    }

    fn task(&self) -> &'static str {
        match self {
            ModelMeta::Lm { .. } => "lm",
            ModelMeta::Classify { .. } => "classify",
            ModelMeta::Translate { .. } => "translate",
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = checkpoint::read_config(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Core(qrnn::Error::Checkpoint(format!("{}: unreadable config echo: {e}", path.display()))))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model metadata serializes")
    }
}

fn dtype_name(d: DType) -> String {
    match d {
        DType::F32 => "f32".into(),
        DType::F64 => "f64".into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(qrnn::Error::Io { path: path.to_path_buf(), source })
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| CliError::config(format!("{key} is required for this task")))?;
    if !p.is_file() {
        return Err(CliError::config(format!("{key}: no such file {}", p.display())));
    }
    Ok(p)
}

fn optional(path: &Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
    match path {
        Some(_) => require(path, key).map(Some),
        None => Ok(None),
    }
}

/// Output files of a training run.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.run.out.clone();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let files = RunFiles { dir };
        let echo = files.config();
        fs::write(&echo, cfg.echo()).map_err(|e| io_err(&echo, e))?;
        Ok(files)
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.cfg")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
}

/// Appends one CSV line per epoch and keeps the best checkpoint current.
struct EpochSink {
    log: BufWriter<File>,
    log_path: PathBuf,
    best_path: PathBuf,
    meta: String,
    best: f64,
}

impl EpochSink {
    fn new(files: &RunFiles, meta: &ModelMeta) -> Result<Self> {
        let log_path = files.log();
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
        writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
        Ok(EpochSink { log, log_path, best_path: files.best(), meta: meta.to_json(), best: f64::INFINITY })
    }

    fn record<T: Scalar, P: Parameters<T>>(&mut self, rec: &EpochRecord, model: &P) -> qrnn::Result<()> {
        let io = |e| qrnn::Error::Io { path: self.log_path.clone(), source: e };
        writeln!(self.log, "{}", rec.csv_line()).map_err(io)?;
        self.log.flush().map_err(|e| qrnn::Error::Io { path: self.log_path.clone(), source: e })?;
        if rec.valid_nll < self.best {
            self.best = rec.valid_nll;
            checkpoint::save(&self.best_path, &self.meta, model)?;
        }
        Ok(())
    }
}

fn write_metrics(files: &RunFiles, metrics: &serde_json::Value) -> Result<()> {
    let p = files.metrics();
    fs::write(&p, serde_json::to_string_pretty(metrics).expect("metrics serialize")).map_err(|e| io_err(&p, e))
}

/// Result of a training command.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<EpochRecord>,
    pub metrics: serde_json::Value,
    pub out_dir: PathBuf,
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { seed: cfg.run.seed, ..cfg.train.clone() }
}

fn stack_config(cfg: &RunConfig, masking: Masking, pooling: Pooling) -> StackConfig {
    StackConfig {
        input_dim: cfg.model.embed,
        hidden_dim: cfg.model.hidden,
        filter_widths: cfg.widths(),
        pooling,
        masking,
        zoneout: cfg.train.zoneout,
        dropout: cfg.train.dropout,
        dense: cfg.model.dense,
    }
}

fn max_size(cfg: &RunConfig) -> Option<usize> {
    (cfg.data.vocab_size > 0).then_some(cfg.data.vocab_size)
}

/// Splits `text` at the line boundary nearest to keeping `1 - fraction`
/// of its characters for training.
pub fn split_tail(text: &str, fraction: f64) -> (&str, &str) {
    let total = text.chars().count();
    let keep = ((1.0 - fraction) * total as f64).round() as usize;
    let byte = text.char_indices().nth(keep).map_or(text.len(), |(i, _)| i);
    let cut = text[byte..].find('\n').map_or(text.len(), |i| byte + i + 1);
    text.split_at(cut)
}

/// Training and validation id streams for a language-modelling run, with
/// the vocabulary built from the training portion.
pub fn lm_corpus(cfg: &RunConfig) -> Result<(Vocabulary, Vec<usize>, Vec<usize>)> {
    let train_path = require(&cfg.data.train, "data.train")?;
    let valid_path = optional(&cfg.data.valid, "data.valid")?;
    let text = data::read_utf8(&train_path)?;
    let (train_text, valid_text) = match &valid_path {
        Some(p) => (text.clone(), data::read_utf8(p)?),
        None => {
            let (a, b) = split_tail(&text, cfg.data.valid_fraction);
            (a.to_string(), b.to_string())
        }
    };
    if valid_text.trim().is_empty() {
        return Err(CliError::Core(qrnn::Error::Data("validation text is empty".into())));
    }
    let vocab = Vocabulary::from_texts(&[&train_text], cfg.data.level, max_size(cfg));
    let train = vocab.encode_stream(&train_text);
    let valid = vocab.encode_stream(&valid_text);
    Ok((vocab, train, valid))
}

pub fn train_lm(cfg: &RunConfig) -> Result<RunSummary> {
    with_threads(cfg.run.threads, || match cfg.run.dtype {
        DType::F32 => train_lm_typed::<f32>(cfg),
        DType::F64 => train_lm_typed::<f64>(cfg),
    })?
}

fn train_lm_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let test_path = optional(&cfg.data.test, "data.test")?;
    let (vocab, train, valid) = lm_corpus(cfg)?;
    let files = RunFiles::create(cfg)?;
    vocab.save(&files.vocab())?;
    let config = LmConfig { vocab_size: vocab.len(), stack: stack_config(cfg, cfg.model.masking, cfg.model.pooling) };
    let mut model = LanguageModel::<T>::new(config.clone(), &mut Rng::new(cfg.run.seed))?;
    let meta = ModelMeta::Lm { dtype: dtype_name(cfg.run.dtype), config };
    let mut sink = EpochSink::new(&files, &meta)?;
    let records = models::train_lm(&mut model, &train, &valid, &train_config(cfg), cfg.eval_batch, |r, m| sink.record(r, m))?;
    checkpoint::save(&files.model(), &meta.to_json(), &model)?;
    let best = best_record(&records);
    let mut metrics = json!({
        "task": "lm",
        "epochs": records.len(),
        "vocab_size": vocab.len(),
        "parameters": model.param_count(),
        "final_valid_nll": records.last().map(|r| r.valid_nll),
        "final_valid_ppl": records.last().map(|r| r.valid_ppl),
        "best_epoch": best.epoch,
        "best_valid_nll": best.valid_nll,
        "best_valid_ppl": best.valid_ppl,
    });
    if let Some(p) = test_path {
        let ids = vocab.encode_stream(&data::read_utf8(&p)?);
        let nll = model.evaluate(&ids, cfg.eval_batch, cfg.train.bptt)?;
        metrics["test_nll"] = json!(nll);
        metrics["test_ppl"] = json!(perplexity(nll));
    }
    write_metrics(&files, &metrics)?;
    Ok(RunSummary { records, metrics, out_dir: files.dir })
}

fn best_record(records: &[EpochRecord]) -> EpochRecord {
    records
        .iter()
        .min_by(|a, b| a.valid_nll.total_cmp(&b.valid_nll))
        .cloned()
        .expect("at least one epoch ran")
}

/// Loads a language model checkpoint of element type `T`.
pub fn load_lm<T: Scalar>(path: &Path) -> Result<LanguageModel<T>> {
    match ModelMeta::read(path)? {
        ModelMeta::Lm { config, dtype } => {
            check_dtype::<T>(&dtype, path)?;
            let mut model = LanguageModel::<T>::new(config, &mut Rng::new(0))?;
            checkpoint::read::<T>(path)?.load_into(&mut model)?;
            Ok(model)
        }
        other => Err(wrong_task(path, "lm", other.task())),
    }
}

fn check_dtype<T: Scalar>(dtype: &str, path: &Path) -> Result<()> {
    let want = match T::DTYPE {
        qrnn::tensor::DType::F32 => "f32",
        qrnn::tensor::DType::F64 => "f64",
    };
    if dtype != want {
        return Err(CliError::Core(qrnn::Error::Checkpoint(format!("{}: holds {dtype} weights, not {want}", path.display()))));
    }
    Ok(())
}

fn wrong_task(path: &Path, want: &str, got: &str) -> CliError {
    CliError::Usage(format!("{} is a {got} checkpoint, expected {want}", path.display()))
}

type Labeled = Vec<(String, u8)>;

fn labeled_split(cfg: &RunConfig) -> Result<(Labeled, Labeled)> {
    let train_path = require(&cfg.data.train, "data.train")?;
    let mut train = data::read_labeled_text(&train_path)?;
    let valid = match optional(&cfg.data.valid, "data.valid")? {
        Some(p) => data::read_labeled_text(&p)?,
        None => {
            let n = ((train.len() as f64) * cfg.data.valid_fraction).round() as usize;
            train.split_off(train.len() - n)
        }
    };
    if train.is_empty() || valid.is_empty() {
        return Err(CliError::Core(qrnn::Error::Data("need at least one training and one validation document".into())));
    }
    Ok((train, valid))
}

pub fn train_classify(cfg: &RunConfig) -> Result<RunSummary> {
    with_threads(cfg.run.threads, || match cfg.run.dtype {
        DType::F32 => train_classify_typed::<f32>(cfg),
        DType::F64 => train_classify_typed::<f64>(cfg),
    })?
}

fn train_classify_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let embeddings = optional(&cfg.data.embeddings, "data.embeddings")?;
    let (train_text, valid_text) = labeled_split(cfg)?;
    let files = RunFiles::create(cfg)?;
    let texts: Vec<&str> = train_text.iter().map(|(t, _)| t.as_str()).collect();
    let vocab = Vocabulary::from_texts(&texts, cfg.data.level, max_size(cfg));
    vocab.save(&files.vocab())?;
    let encode = |docs: &[(String, u8)]| -> Vec<(Vec<usize>, u8)> {
        docs.iter().map(|(t, l)| (vocab.encode(t), *l)).filter(|(d, _)| !d.is_empty()).collect()
    };
    let (train, valid) = (encode(&train_text), encode(&valid_text));
    let config = ClassifierConfig {
        vocab_size: vocab.len(),
        classes: cfg.model.classes,
        readout: cfg.model.readout,
        stack: stack_config(cfg, cfg.model.masking, cfg.model.pooling),
    };
    let mut rng = Rng::new(cfg.run.seed);
    let mut model = Classifier::<T>::new(config.clone(), &mut rng)?;
    if let Some(p) = embeddings {
        model.embed = data::load_embeddings(&p, &vocab, cfg.model.embed, &mut rng)?;
    }
    let meta = ModelMeta::Classify { dtype: dtype_name(cfg.run.dtype), config };
    let mut sink = EpochSink::new(&files, &meta)?;
    let records = models::train_classifier(&mut model, &train, &valid, &train_config(cfg), |r, m| sink.record(r, m))?;
    checkpoint::save(&files.model(), &meta.to_json(), &model)?;
    let best = best_record(&records);
    let metrics = json!({
        "task": "classify",
        "epochs": records.len(),
        "vocab_size": vocab.len(),
        "parameters": model.param_count(),
        "final_valid_accuracy": records.last().and_then(|r| r.valid_accuracy),
        "best_epoch": best.epoch,
        "best_valid_nll": best.valid_nll,
        "best_valid_accuracy": best.valid_accuracy,
    });
    write_metrics(&files, &metrics)?;
    Ok(RunSummary { records, metrics, out_dir: files.dir })
}

type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

/// Encoded training and validation pairs with a vocabulary shared by both
/// languages.
pub fn parallel_corpus(cfg: &RunConfig) -> Result<(Vocabulary, Pairs, Pairs)> {
    let src = require(&cfg.data.src_train, "data.src_train")?;
    let tgt = require(&cfg.data.tgt_train, "data.tgt_train")?;
    let valid_paths = match (optional(&cfg.data.src_valid, "data.src_valid")?, optional(&cfg.data.tgt_valid, "data.tgt_valid")?) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(CliError::config("data.src_valid and data.tgt_valid must be given together")),
    };
    let mut train = data::read_parallel_text(&src, &tgt, cfg.data.max_chars)?;
    let valid = match valid_paths {
        Some((a, b)) => data::read_parallel_text(&a, &b, cfg.data.max_chars)?,
        None => {
            let n = ((train.len() as f64) * cfg.data.valid_fraction).round() as usize;
            train.split_off(train.len() - n)
        }
    };
    let texts: Vec<&str> = train.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let vocab = Vocabulary::from_texts(&texts, cfg.data.level, max_size(cfg));
    let encode = |pairs: &[(String, String)]| -> Pairs {
        pairs
            .iter()
            .map(|(a, b)| (vocab.encode(a), vocab.encode(b)))
            .filter(|(a, _)| !a.is_empty())
            .collect()
    };
    let (tr, va) = (encode(&train), encode(&valid));
    if tr.is_empty() || va.is_empty() {
        return Err(CliError::Core(qrnn::Error::Data("need at least one training and one validation pair".into())));
    }
    Ok((vocab, tr, va))
}

fn seq2seq_config(cfg: &RunConfig, vocab_size: usize) -> Seq2SeqConfig {
    Seq2SeqConfig {
        vocab_size,
        embed_dim: cfg.model.embed,
        hidden_dim: cfg.model.hidden,
        layers: cfg.model.layers,
        encoder_first_width: cfg.model.encoder_first_k,
        encoder_width: cfg.model.encoder_k,
        decoder_width: cfg.model.decoder_k,
        reverse_source: cfg.model.reverse_source,
    }
}

fn max_len_for(src_len: usize, max_len: usize) -> usize {
    if max_len > 0 {
        max_len
    } else {
        2 * src_len + 10
    }
}

/// Beam-search translations of every source in `pairs`, with exact-match
/// rate and corpus BLEU against the targets.
pub fn score_translations<T: Scalar>(
    model: &Seq2Seq<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<(Vec<Vec<usize>>, f64, f64)> {
    let mut hyps = Vec::with_capacity(pairs.len());
    for (src, _) in pairs {
        hyps.push(model.beam_search(src, beam, alpha, max_len_for(src.len(), max_len))?.tokens);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / pairs.len() as f64;
    let bleu = corpus_bleu(&hyps, &refs, 4, false)?;
    Ok((hyps, exact, bleu))
}

pub fn train_translate(cfg: &RunConfig) -> Result<RunSummary> {
    with_threads(cfg.run.threads, || match cfg.run.dtype {
        DType::F32 => train_translate_typed::<f32>(cfg),
        DType::F64 => train_translate_typed::<f64>(cfg),
    })?
}

fn train_translate_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let (vocab, train, valid) = parallel_corpus(cfg)?;
    let files = RunFiles::create(cfg)?;
    vocab.save(&files.vocab())?;
    let config = seq2seq_config(cfg, vocab.len());
    let mut model = Seq2Seq::<T>::new(config.clone(), &mut Rng::new(cfg.run.seed))?;
    let meta = ModelMeta::Translate { dtype: dtype_name(cfg.run.dtype), config };
    let mut sink = EpochSink::new(&files, &meta)?;
    let records = models::train_seq2seq(&mut model, &train, &valid, &train_config(cfg), |r, m| sink.record(r, m))?;
    checkpoint::save(&files.model(), &meta.to_json(), &model)?;
    let (hyps, exact, bleu) = score_translations(&model, &valid, cfg.decode.beam, cfg.decode.alpha, cfg.decode.max_len)?;
    let out = files.dir.join("valid_translations.txt");
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&vocab.decode(h)?);
        text.push('\n');
    }
    fs::write(&out, text).map_err(|e| io_err(&out, e))?;
    let best = best_record(&records);
    let metrics = json!({
        "task": "translate",
        "epochs": records.len(),
        "vocab_size": vocab.len(),
        "parameters": model.param_count(),
        "best_epoch": best.epoch,
        "best_valid_nll": best.valid_nll,
        "valid_exact_match": exact,
        "valid_bleu": bleu,
        "beam": cfg.decode.beam,
        "alpha": cfg.decode.alpha,
    });
    write_metrics(&files, &metrics)?;
    Ok(RunSummary { records, metrics, out_dir: files.dir })
}

pub fn load_seq2seq<T: Scalar>(path: &Path) -> Result<Seq2Seq<T>> {
    match ModelMeta::read(path)? {
        ModelMeta::Translate { config, dtype } => {
            check_dtype::<T>(&dtype, path)?;
            let mut model = Seq2Seq::<T>::new(config, &mut Rng::new(0))?;
            checkpoint::read::<T>(path)?.load_into(&mut model)?;
            Ok(model)
        }
        other => Err(wrong_task(path, "translate", other.task())),
    }
}

pub fn load_classifier<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    match ModelMeta::read(path)? {
        ModelMeta::Classify { config, dtype } => {
            check_dtype::<T>(&dtype, path)?;
            let mut model = Classifier::<T>::new(config, &mut Rng::new(0))?;
            checkpoint::read::<T>(path)?.load_into(&mut model)?;
            Ok(model)
        }
        other => Err(wrong_task(path, "classify", other.task())),
    }
}

fn vocab_beside(checkpoint: &Path, explicit: Option<PathBuf>) -> Result<Vocabulary> {
    let p = explicit.unwrap_or_else(|| checkpoint.with_file_name("vocab.json"));
    Ok(Vocabulary::load(&p)?)
}

/// Translates each line of `input`; blank lines stay blank.
pub fn translate_lines<T: Scalar>(
    model: &Seq2Seq<T>,
    vocab: &Vocabulary,
    input: &str,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let src = vocab.encode(line);
        if src.is_empty() {
            out.push(String::new());
            continue;
        }
        let tr = model.beam_search(&src, beam, alpha, max_len_for(src.len(), max_len))?;
        out.push(vocab.decode(&tr.tokens)?);
    }
    Ok(out)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn translate_command(
    checkpoint: &Path,
    input: &Path,
    out: Option<&Path>,
    vocab: Option<PathBuf>,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<()> {
    if beam == 0 {
        return Err(CliError::Usage("--beam must be positive".into()));
    }
    let meta = ModelMeta::read(checkpoint)?;
    let vocab = vocab_beside(checkpoint, vocab)?;
    let text = data::read_utf8(input)?;
    let lines = match meta.dtype() {
        "f64" => translate_lines(&load_seq2seq::<f64>(checkpoint)?, &vocab, &text, beam, alpha, max_len)?,
        _ => translate_lines(&load_seq2seq::<f32>(checkpoint)?, &vocab, &text, beam, alpha, max_len)?,
    };
    let mut s = lines.join("\n");
    if !lines.is_empty() {
        s.push('\n');
    }
    emit(out, &s)
}

fn dump_typed<T: Scalar>(checkpoint: &Path, meta: &ModelMeta, ids: &[usize], out: &Path) -> Result<()> {
    match meta {
        ModelMeta::Lm { .. } => dump_hidden_states(&load_lm::<T>(checkpoint)?, ids, out)?,
        ModelMeta::Classify { .. } => dump_hidden_states(&load_classifier::<T>(checkpoint)?, ids, out)?,
        ModelMeta::Translate { .. } => {
            return Err(CliError::Usage("dump-states needs a language-model or classifier checkpoint".into()))
        }
    }
    Ok(())
}

fn dump_command(checkpoint: &Path, input: &Path, vocab: Option<PathBuf>, out: &Path) -> Result<()> {
    let meta = ModelMeta::read(checkpoint)?;
    let vocab = vocab_beside(checkpoint, vocab)?;
    let text = data::read_utf8(input)?;
    let ids = match vocab.level() {
        Level::Char => vocab.encode(&text),
        Level::Word => vocab.encode_stream(&text),
    };
    if ids.is_empty() {
        return Err(CliError::Core(qrnn::Error::Data(format!("{} contains no tokens", input.display()))));
    }
    match meta.dtype() {
        "f64" => dump_typed::<f64>(checkpoint, &meta, &ids, out),
        _ => dump_typed::<f32>(checkpoint, &meta, &ids, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn bench_command(
    batches: Vec<usize>,
    seqlens: Vec<usize>,
    hidden: usize,
    k: usize,
    kind: &str,
    mode: &str,
    reps: usize,
    seed: u64,
    threads: usize,
    json_out: bool,
    profile: bool,
    vocab: usize,
    out: Option<&Path>,
) -> Result<()> {
    let kind: LayerKind = kind.parse()?;
    let mode: Mode = mode.parse()?;
    let text = with_threads(threads, || -> Result<String> {
        if profile {
            let config = LmConfig {
                vocab_size: vocab,
                stack: StackConfig {
                    input_dim: hidden,
                    hidden_dim: hidden,
                    filter_widths: vec![k; 2],
                    pooling: Pooling::Fo,
                    masking: Masking::Masked,
                    zoneout: 0.0,
                    dropout: 0.0,
                    dense: false,
                },
            };
            let bptt = *seqlens.first().unwrap_or(&105);
            let batch = *batches.first().unwrap_or(&20);
            let p = bench::profile_breakdown(&config, batch, bptt, reps, seed)?;
            return Ok(serde_json::to_string_pretty(&p).expect("profile serializes") + "\n");
        }
        let spec = GridSpec { batches, seqlens, hidden, k, qrnn: kind, mode, reps, seed };
        let grid = bench::speed_grid(&spec)?;
        Ok(if json_out { grid.to_json() + "\n" } else { grid.to_csv() })
    })??;
    emit(out, &text)
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainLm(args) => train_lm(&args.resolve()?).map(|_| ()),
        Command::TrainClassify(args) => train_classify(&args.resolve()?).map(|_| ()),
        Command::TrainTranslate(args) => train_translate(&args.resolve()?).map(|_| ()),
        Command::Translate { checkpoint, input, out, vocab, beam, alpha, max_len, threads } => {
            with_threads(threads, || translate_command(&checkpoint, &input, out.as_deref(), vocab, beam, alpha, max_len))?
        }
        Command::Bench { batches, seqlens, hidden, k, kind, mode, reps, seed, threads, json, profile, vocab, out } => {
            bench_command(batches, seqlens, hidden, k, &kind, &mode, reps, seed, threads, json, profile, vocab, out.as_deref())
        }
        Command::DumpStates { checkpoint, input, vocab, out } => dump_command(&checkpoint, &input, vocab, &out),
    }
}
