//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "RSNCKPT\0"
//! version   u32
//! arch      u64      architecture fingerprint
//! iter      u64
//! meta      u32 length + UTF-8 JSON
//! count     u32
//! count x { name: u16 length + UTF-8, dtype: u8, rank: u8, dims: rank x u64, data }
//! ```

use std::path::Path;

use crate::error::{io_at, Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 8] = *b"RSNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            TensorData::F32(t) => t.all_finite(),
            TensorData::F64(t) => t.all_finite(),
        }
    }
}

/// Conversion between a tensor of a concrete element type and [`TensorData`].
pub trait Stored: Element {
    fn wrap(t: Tensor<Self>) -> TensorData;
    fn unwrap(d: &TensorData) -> Option<&Tensor<Self>>;
}

impl Stored for f32 {
    fn wrap(t: Tensor<f32>) -> TensorData {
        TensorData::F32(t)
    }

    fn unwrap(d: &TensorData) -> Option<&Tensor<f32>> {
        match d {
            TensorData::F32(t) => Some(t),
            TensorData::F64(_) => None,
        }
    }
}

impl Stored for f64 {
    fn wrap(t: Tensor<f64>) -> TensorData {
        TensorData::F64(t)
    }

    fn unwrap(d: &TensorData) -> Option<&Tensor<f64>> {
        match d {
            TensorData::F64(t) => Some(t),
            TensorData::F32(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub iter: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(ckpt.fingerprint.to_le_bytes());
    out.extend(ckpt.iter.to_le_bytes());
    out.extend((meta.len() as u32).to_le_bytes());
    out.extend(&meta);
    out.extend((ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor {name} cannot be stored")));
        }
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        match t {
            TensorData::F32(t) => put_tensor(&mut out, t),
            TensorData::F64(t) => put_tensor(&mut out, t),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Element>(&mut self, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = numel
            .and_then(|n| n.checked_mul(T::DTYPE.size()))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} has absurd shape {shape:?}")))?;
        let raw = self.take(size, name)?;
        let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))
    }
}

/// Parse a checkpoint, checking the fingerprint when `expected` is given.
pub fn decode(bytes: &[u8], expected: Option<u64>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let fingerprint = r.u64("fingerprint")?;
    if let Some(e) = expected {
        if e != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: e,
                found: fingerprint,
            });
        }
    }
    let iter = r.u64("iteration")?;
    let meta_len = r.u32("meta length")? as usize;
    let meta = serde_json::from_slice(r.take(meta_len, "meta")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta is not valid JSON: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let code = r.u8("dtype")?;
        let dtype =
            DType::from_code(code).ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name}: unknown dtype {code}")))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let t = match dtype {
            DType::F32 => TensorData::F32(r.tensor(shape, &name)?),
            DType::F64 => TensorData::F64(r.tensor(shape, &name)?),
        };
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        fingerprint,
        iter,
        meta,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_at(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<u64>) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(io_at(path))?, expected)
}
