//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSLD" | u32 version
//! u64 step | u64 epoch | f64 loss | u32 len + UTF-8 config snapshot
//! u32 tensor count
//! per tensor: u32 len + UTF-8 name | u32 rank | u32 dims[rank] | f32 values
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSLD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config: String,
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Every store entry whose name starts with one of `prefixes`, in store
    /// order. An empty prefix list takes everything.
    pub fn from_store(store: &ParamStore, prefixes: &[&str], meta: CheckpointMeta) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, n, _)| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, n, p)| (n.to_string(), p.tensor.clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> std::result::Result<Vec<u8>, CheckpointError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.step.to_le_bytes());
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.loss.to_le_bytes());
        put_str(&mut out, &self.meta.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                expected: VERSION,
                found: version,
            });
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let loss = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n > 0).ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` has shape {shape:?}")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            meta: CheckpointMeta { config, step, epoch, loss },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&super::read_file(path)?)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}
