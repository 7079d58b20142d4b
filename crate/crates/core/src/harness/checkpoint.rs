//! Binary checkpoints: `"ALTK"`, version, length-prefixed TOML header and a named tensor table.
//!
//! All integers are little-endian u32. Each tensor entry is name length, UTF-8 name, rank,
//! dims, a dtype byte and the raw little-endian payload.

use std::io::Write;
use std::path::Path;

use atok_autodiff::{DType, Float, Tensor};
use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::ar::{ArConfig, ArModel};
use crate::error::{Error, Result};
use crate::tokenizer::{TokConfig, Tokenizer};

pub const MAGIC: &[u8; 4] = b"ALTK";
pub const VERSION: u32 = 1;

const USAGE_TENSOR: &str = "usage_ema";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt { path: self.origin.into(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            out.push(t.dtype().code());
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let config = r.string()?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| r.corrupt(format!("tensor `{name}` has unknown dtype {code}")))?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("tensor too large"))?;
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| r.corrupt("tensor too large"))?)?;
            let bad = |e| Error::Corrupt { path: origin.into(), msg: format!("tensor `{name}`: {e}") };
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()).map_err(bad)?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()).map_err(bad)?,
                ),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes after tensor table"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn header<H: for<'de> Deserialize<'de>>(&self, kind: &str, origin: &Path) -> Result<H> {
        let table: toml::Table = toml::from_str(&self.config).map_err(|e| Error::Corrupt { path: origin.into(), msg: format!("header: {e}") })?;
        let found = table.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if found != kind {
            return Err(Error::InvalidArgument(format!("{} holds a `{found}` checkpoint, expected `{kind}`", origin.display())));
        }
        toml::from_str(&self.config).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokHeader {
    kind: String,
    stage: u32,
    model: TokConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArHeader {
    kind: String,
    model: ArConfig,
}

fn header_text<H: Serialize>(h: &H) -> Result<String> {
    toml::to_string(h).map_err(|e| Error::Config(format!("cannot serialise header: {e}")))
}

pub fn tokenizer_checkpoint<T: Float>(model: &Tokenizer<T>) -> Result<Checkpoint> {
    let config = header_text(&TokHeader { kind: "tokenizer".into(), stage: model.stage, model: model.cfg.clone() })?;
    let mut tensors: Vec<(String, StoredTensor)> = model.params.iter().map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t))).collect();
    let usage = Tensor::new(vec![model.usage_ema.len()], model.usage_ema.clone())?;
    tensors.push((USAGE_TENSOR.into(), StoredTensor::F64(usage)));
    Ok(Checkpoint { config, tensors })
}

pub fn save_tokenizer<T: Float>(model: &Tokenizer<T>, path: &Path) -> Result<()> {
    tokenizer_checkpoint(model)?.save(path)
}

pub fn load_tokenizer<T: Float>(path: &Path) -> Result<Tokenizer<T>> {
    let ck = Checkpoint::load(path)?;
    let h: TokHeader = ck.header("tokenizer", path)?;
    let mut tensors = ck.tensors;
    let usage = match tensors.pop() {
        Some((n, StoredTensor::F64(t))) if n == USAGE_TENSOR => t.into_data(),
        _ => return Err(Error::Corrupt { path: path.into(), msg: format!("missing `{USAGE_TENSOR}` table entry") }),
    };
    let tensors = tensors.into_iter().map(|(n, t)| (n, t.to_tensor())).collect();
    Tokenizer::from_parts(h.model, tensors, usage, h.stage)
}

pub fn generator_checkpoint<T: Float>(model: &ArModel<T>) -> Result<Checkpoint> {
    let config = header_text(&ArHeader { kind: "generator".into(), model: model.cfg.clone() })?;
    let tensors = model.params.iter().map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t))).collect();
    Ok(Checkpoint { config, tensors })
}

pub fn save_generator<T: Float>(model: &ArModel<T>, path: &Path) -> Result<()> {
    generator_checkpoint(model)?.save(path)
}

pub fn load_generator<T: Float>(path: &Path) -> Result<ArModel<T>> {
    let ck = Checkpoint::load(path)?;
    let h: ArHeader = ck.header("generator", path)?;
    ArModel::from_parts(h.model, ck.tensors.into_iter().map(|(n, t)| (n, t.to_tensor())).collect())
}
