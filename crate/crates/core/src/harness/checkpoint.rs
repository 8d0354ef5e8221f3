//! Binary parameter snapshots.
//!
//! Layout (little-endian): `DTTA`, version `u32`, metadata length `u32` and
//! JSON metadata (model config and vocabulary), tensor count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, dtype code `u8`, rank `u32`, dims
//! `u64 × rank`, payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::docmodel::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DTTA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, vocab: Vec<String>, params: ParamSet<f32>) -> Self {
        Self {
            version: VERSION,
            model,
            vocab,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let meta = serde_json::to_vec(&Meta {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
        })?;
        out.extend_from_slice(&len32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len32(self.params.len())?.to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&len32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(f32::DTYPE_CODE);
            out.extend_from_slice(&len32(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != f32::DTYPE_CODE {
                return Err(Error::Checkpoint(format!("tensor `{name}` has dtype code {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let ckpt = Self {
            version,
            model: meta.model,
            vocab: meta.vocab,
            params,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Every tensor the config implies is present with the right shape.
    fn check_shapes(&self) -> Result<()> {
        let expected = self.model.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, config implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .params
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and insists on a particular model configuration.
    pub fn load_expecting(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.model != model {
            return Err(Error::Checkpoint(format!(
                "{}: model config {:?} does not match expected {:?}",
                path.display(),
                ckpt.model,
                model
            )));
        }
        Ok(ckpt)
    }
}

fn len32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
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
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
