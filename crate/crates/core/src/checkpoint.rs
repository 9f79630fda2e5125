//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QRNN" | u32 version | u32 len | config JSON (len bytes)
//! u32 count, then per tensor:
//!   u32 len | name | u8 dtype | u8 rank | u64 dims[rank] | raw data
//! ```
//!
//! The config echo lets a loader rebuild the model before reading weights.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"QRNN";
pub const VERSION: u32 = 1;

/// Serializes the parameters of `model` with a config echo.
pub fn to_bytes<T: Scalar, P: Parameters<T>>(config_json: &str, model: &P) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    let named = model.named_params();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar, P: Parameters<T>>(path: &Path, config_json: &str, model: &P) -> Result<()> {
    let bytes = to_bytes(config_json, model);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let config_json = r.string()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(len.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?)?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { version, config_json, tensors })
}

pub fn read<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Returns only the config echo, without materializing tensors.
pub fn read_config(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!("{}: bad magic: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    r.string()
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies stored tensors into `model`, requiring identical names and
    /// shapes in the same order.
    pub fn load_into<P: Parameters<T>>(self, model: &mut P) -> Result<()> {
        let mut stored = self.tensors.into_iter();
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match stored.next() {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some((n, _)) if n != name => err = Some(Error::Checkpoint(format!("expected tensor {name}, found {n}"))),
                Some((_, s)) if s.shape() != t.shape() => {
                    err = Some(Error::Checkpoint(format!("{name}: stored shape {:?}, model has {:?}", s.shape(), t.shape())))
                }
                Some((_, s)) => *t = s,
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((n, _)) = stored.next() {
            return Err(Error::Checkpoint(format!("unexpected extra tensor {n}")));
        }
        Ok(())
    }
}
