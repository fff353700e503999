//! Binary checkpoint format.
//!
//! ```text
//! magic "BWRKCKPT" | u32 version | u32 len + config (TOML)
//! u32 n_tensors, then per tensor:
//!   u32 len + name | u32 ndim | u64 dims... | little-endian values
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::{Float, Model, ModelConfig, Precision};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BWRKCKPT";
const VERSION: u32 = 1;

/// A checkpoint of either precision.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn score(&self, pair: &crate::tokenizer::TokenizedPair) -> Result<f64> {
        match self {
            AnyModel::F32(m) => m.score(pair),
            AnyModel::F64(m) => m.score(pair),
        }
    }

    pub fn relevance_margin(&self, pair: &crate::tokenizer::TokenizedPair) -> Result<f64> {
        match self {
            AnyModel::F32(m) => m.relevance_margin(pair),
            AnyModel::F64(m) => m.relevance_margin(pair),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::F32(m) => save_model(m, path),
            AnyModel::F64(m) => save_model(m, path),
        }
    }
}

impl From<Model<f32>> for AnyModel {
    fn from(m: Model<f32>) -> Self {
        AnyModel::F32(m)
    }
}

impl From<Model<f64>> for AnyModel {
    fn from(m: Model<f64>) -> Self {
        AnyModel::F64(m)
    }
}

pub(crate) fn encode<T: Float>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.num_params() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let entries = model.layout().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &dim in &e.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &model.params()[e.range()] {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_model<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

fn read_header<'a>(r: &mut Reader<'a>) -> Result<ModelConfig> {
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig::from_text(r.string()?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn decode_body<T: Float>(r: &mut Reader<'_>, config: ModelConfig) -> Result<Model<T>> {
    let layout = super::Layout::new(&config);
    let mut params = vec![T::zero(); layout.total()];
    let n = r.u32()? as usize;
    if n != layout.entries().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            layout.entries().len()
        )));
    }
    for e in layout.entries() {
        let name = r.string()?;
        if name != e.name {
            return Err(Error::Checkpoint(format!("expected tensor `{}`, found `{name}`", e.name)));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != e.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, expected {:?}",
                e.shape
            )));
        }
        let raw = r.take(e.slot.len() * T::BYTES)?;
        for (dst, chunk) in params[e.range()].iter_mut().zip(raw.chunks_exact(T::BYTES)) {
            *dst = T::read_le(chunk);
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Model::from_parts(config, params)
}

pub(crate) fn decode_any(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { bytes, pos: 0 };
    let cfg = read_header(&mut r)?;
    match cfg.precision {
        Precision::F32 => decode_body(&mut r, cfg).map(AnyModel::F32),
        Precision::F64 => decode_body(&mut r, cfg).map(AnyModel::F64),
    }
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes)
}

/// Loads a checkpoint whose precision must match `T`.
pub fn load_model<T: Float>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let cfg = read_header(&mut r)?;
    if cfg.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {:?} does not match requested {:?}",
            cfg.precision,
            T::PRECISION
        )));
    }
    decode_body(&mut r, cfg)
}
