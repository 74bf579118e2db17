//! MDCK checkpoint container.
//!
//! Layout, little-endian: magic `MDCK`, version `u32`, `u32` byte length and
//! UTF-8 JSON metadata, `u32` tensor count, then per tensor: `u16` name
//! length, name bytes, dtype `u8` (0 = f32, 1 = f64), rank `u8`, `u32` dims,
//! raw data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values in the requested precision; a dtype change is a mismatch.
    pub fn to_real<T: Real>(&self) -> Result<Vec<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Mismatch(format!(
                "checkpoint stores {:?} values, runtime uses {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        })
    }

    pub fn from_real<T: Real>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: TensorData::from_real(&t.data()),
        }
    }

    pub fn from_values<T: Real>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::from_real(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: serde_json::Value,
    pub epoch: usize,
    pub pc_best: f64,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Contract(format!("tensor '{}' cannot be encoded", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::dim(format!("tensor '{}' shape disagrees with its data", t.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.data.dtype().code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not an MDCK checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported MDCK version {version}")));
        }
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Corruption(format!("tensor '{name}' has an unknown dtype")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("tensor too large".into()))?)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::Corruption("tensor too large".into()))?)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename keeps a previous checkpoint intact on failure
        let tmp = path.with_extension("mdck.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("checkpoint truncated at byte {}", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
