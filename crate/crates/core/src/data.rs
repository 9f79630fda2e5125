//! Corpus loading, vocabularies and batching.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Char,
    Word,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Level::Char),
            "word" => Ok(Level::Word),
            other => Err(Error::Argument(format!("unknown vocabulary level '{other}' (expected char or word)"))),
        }
    }
}

/// Reads a whole file as UTF-8, reporting the byte offset of the first
/// invalid sequence.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Splits text into symbols: Unicode scalar values or whitespace-separated
/// words.
pub fn tokenize(text: &str, level: Level) -> Vec<&str> {
    match level {
        Level::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
        Level::Word => text.split_whitespace().collect(),
    }
}

/// Symbol ↔ id map with PAD, BOS, EOS and UNK at ids 0–3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    level: Level,
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from texts, ordering symbols by descending
    /// frequency and then lexicographically. `max_size` caps the total
    /// size including the reserved entries.
    pub fn from_texts(texts: &[&str], level: Level, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text, level) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(s, _)| !RESERVED.contains(s)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap.saturating_sub(RESERVED.len()));
        }
        let symbols = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(s, _)| s.to_string()))
            .collect();
        Self::from_symbols(level, symbols)
    }

    fn from_symbols(level: Level, symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary { level, symbols, index }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Ids of `text`, with UNK for unknown symbols.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.level).into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Ids of `text`, failing on the first unknown symbol.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.level)
            .into_iter()
            .map(|t| self.id(t).ok_or_else(|| Error::Vocabulary(format!("symbol {t:?} not in vocabulary"))))
            .collect()
    }

    /// Text for `ids`, skipping PAD, BOS and EOS. Words are joined by single
    /// spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            parts.push(self.symbol(id).ok_or_else(|| Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len())))?);
        }
        Ok(match self.level {
            Level::Char => parts.concat(),
            Level::Word => parts.join(" "),
        })
    }

    /// One id stream for language modelling: every character for char
    /// level; every word followed by EOS at each line end for word level.
    pub fn encode_stream(&self, text: &str) -> Vec<usize> {
        match self.level {
            Level::Char => self.encode(text),
            Level::Word => text
                .lines()
                .flat_map(|l| self.encode(l).into_iter().chain(std::iter::once(EOS)))
                .collect(),
        }
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {}", self.len())))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_utf8(path)?;
        let v: Vocabulary =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if v.symbols.len() < RESERVED.len() || v.symbols[..4] != RESERVED {
            return Err(Error::Data(format!("{}: reserved entries missing", path.display())));
        }
        Ok(Self::from_symbols(v.level, v.symbols))
    }
}

/// Vocabulary over one or more files (e.g. both sides of a parallel
/// corpus for a unified vocabulary).
pub fn build_vocab(paths: &[&Path], level: Level, max_size: Option<usize>) -> Result<Vocabulary> {
    let texts = paths.iter().map(|p| read_utf8(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Ok(Vocabulary::from_texts(&refs, level, max_size))
}

/// One BPTT window of every stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmBatch {
    pub batch: usize,
    pub steps: usize,
    /// `[batch, steps]`, row-major.
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// True when the previous window's recurrent state should carry over.
    pub continues: bool,
}

/// Splits `ids` into `batch_size` contiguous streams of equal length (the
/// tail is dropped) and cuts them into windows of up to `bptt` inputs with
/// one-shifted targets.
pub fn batch_lm(ids: &[usize], batch_size: usize, bptt: usize) -> Result<Vec<LmBatch>> {
    if batch_size == 0 || bptt == 0 {
        return Err(Error::Argument("batch size and bptt must be positive".into()));
    }
    if ids.len() < batch_size * 2 {
        return Err(Error::Argument(format!(
            "corpus of {} tokens is too small for {} streams",
            ids.len(),
            batch_size
        )));
    }
    let len = ids.len() / batch_size;
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < len {
        let steps = bptt.min(len - 1 - start);
        let mut inputs = Vec::with_capacity(batch_size * steps);
        let mut targets = Vec::with_capacity(batch_size * steps);
        for b in 0..batch_size {
            let s = &ids[b * len..(b + 1) * len];
            inputs.extend_from_slice(&s[start..start + steps]);
            targets.extend_from_slice(&s[start + 1..start + steps + 1]);
        }
        out.push(LmBatch { batch: batch_size, steps, inputs, targets, continues: start > 0 });
        start += steps;
    }
    Ok(out)
}

/// Reads aligned sentence files, dropping pairs where either side has more
/// than `max_chars` Unicode scalar values.
pub fn read_parallel_text(src: &Path, tgt: &Path, max_chars: usize) -> Result<Vec<(String, String)>> {
    let s = read_utf8(src)?;
    let t = read_utf8(tgt)?;
    let sl: Vec<&str> = s.lines().collect();
    let tl: Vec<&str> = t.lines().collect();
    if sl.len() != tl.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            sl.len(),
            tgt.display(),
            tl.len()
        )));
    }
    Ok(sl
        .into_iter()
        .zip(tl)
        .filter(|(a, b)| a.chars().count() <= max_chars && b.chars().count() <= max_chars)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

/// [`read_parallel_text`] followed by encoding both sides with `vocab`.
pub fn load_parallel_corpus(
    src: &Path,
    tgt: &Path,
    vocab: &Vocabulary,
    max_chars: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    Ok(read_parallel_text(src, tgt, max_chars)?
        .into_iter()
        .map(|(a, b)| (vocab.encode(&a), vocab.encode(&b)))
        .collect())
}

/// Reads `label<TAB>text` lines (label 0 or 1); blank lines are skipped.
pub fn read_labeled_text(path: &Path) -> Result<Vec<(String, u8)>> {
    let text = read_utf8(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |why: &str| Error::Data(format!("{}:{}: {why}", path.display(), i + 1));
        let (label, body) = line.split_once('\t').ok_or_else(|| malformed("expected label<TAB>text"))?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(&format!("label must be 0 or 1, got {other:?}"))),
        };
        docs.push((body.to_string(), label));
    }
    Ok(docs)
}

pub fn load_labeled_docs(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Vec<usize>, u8)>> {
    Ok(read_labeled_text(path)?
        .into_iter()
        .map(|(t, l)| (vocab.encode(&t), l))
        .collect())
}

/// Embedding matrix `[|V|, dim]`: every row starts uniform in ±0.1 from
/// `rng`, then rows of words listed in the `word v1 … vdim` file are
/// overwritten with the file's values.
pub fn load_embeddings<T: Scalar>(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let mut table = Tensor::uniform(&[vocab.len(), dim], -0.1, 0.1, rng);
    let text = read_utf8(path)?;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if values.len() != dim {
            return Err(Error::Data(format!(
                "{}:{}: {} values, expected {}",
                path.display(),
                i + 1,
                values.len(),
                dim
            )));
        }
        if let Some(id) = vocab.id(word) {
            for (dst, v) in table.row_mut(id).iter_mut().zip(values) {
                *dst = T::of(v);
            }
        }
    }
    Ok(table)
}

/// Pads documents to the longest one with PAD; returns `[B, T]` ids and
/// the true lengths.
pub fn pad_batch(docs: &[&[usize]]) -> (Vec<usize>, usize, Vec<usize>) {
    let steps = docs.iter().map(|d| d.len()).max().unwrap_or(0).max(1);
    let mut ids = vec![PAD; docs.len() * steps];
    for (b, d) in docs.iter().enumerate() {
        ids[b * steps..b * steps + d.len()].copy_from_slice(d);
    }
    (ids, steps, docs.iter().map(|d| d.len()).collect())
}

/// Groups pair indices by identical (source, target) length and cuts each
/// group into batches of at most `batch_size`; batch order is shuffled by
/// `rng`.
pub fn bucket_by_length(pairs: &[(Vec<usize>, Vec<usize>)], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (s, t)) in pairs.iter().enumerate() {
        groups.entry((s.len(), t.len())).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}
