//! Binary checkpoint format.
//!
//! ```text
//! "USNT" | u32 version | u32 len, JSON header | u32 record count
//! records: u32 name len, name, u8 dtype, u32 rank, u64 dims.., payload
//! u32 CRC32 of everything before it
//! ```
//! All integers and payloads are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{NetworkConfig, UsNet};
use super::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"USNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    step: u64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Widened to f64; exact for both supported dtypes.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: NetworkConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &UsNet<T>, step: u64, seed: u64) -> Self {
        Checkpoint {
            version: VERSION,
            config: model.config().clone(),
            step,
            seed,
            params: model
                .named_params()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    dtype: T::DTYPE,
                    dims: p.shape.clone(),
                    values: p.data.iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<UsNet<T>> {
        let mut model = UsNet::<T>::build(&self.config, self.seed)?;
        let mut records = self.params.iter();
        for p in model.named_params_mut() {
            let r = records
                .next()
                .ok_or_else(|| Error::CorruptPayload(format!("missing parameter {}", p.name)))?;
            if r.name != p.name || r.dims != p.shape {
                return Err(Error::CorruptPayload(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    r.name, r.dims, p.name, p.shape
                )));
            }
            if r.dtype != T::DTYPE {
                return Err(Error::input(format!(
                    "parameter {} stored as {:?}, requested {:?}",
                    r.name,
                    r.dtype,
                    T::DTYPE
                )));
            }
            for (d, &v) in p.data.iter_mut().zip(&r.values) {
                *d = T::of(v);
            }
        }
        if records.next().is_some() {
            return Err(Error::CorruptPayload("unexpected extra parameters".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
        })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.dtype as u8);
            out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
            for &d in &p.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.values {
                match p.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptPayload(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing USNT magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::CorruptPayload(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("parameter name"))?;
            let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| corrupt("unknown dtype tag"))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let payload = r.take(len.checked_mul(dtype.size()).ok_or_else(|| corrupt("dims"))?)?;
            let values = payload
                .chunks_exact(dtype.size())
                .map(|c| match dtype {
                    DType::F32 => f32::read_le(c) as f64,
                    DType::F64 => f64::read_le(c),
                })
                .collect();
            params.push(ParamRecord {
                name,
                dtype,
                dims,
                values,
            });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            step: header.step,
            seed: header.seed,
            params,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptPayload("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &UsNet<T>, step: u64, seed: u64, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_model(model, step, seed);
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))?;
    Ok(ckpt)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(UsNet<T>, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    Ok((ckpt.to_model()?, ckpt))
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &NetworkConfig) -> Result<(UsNet<T>, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if &ckpt.config != expected {
        return Err(Error::ConfigMismatch);
    }
    Ok((ckpt.to_model()?, ckpt))
}
