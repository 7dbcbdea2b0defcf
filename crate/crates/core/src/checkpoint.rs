//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CDN1"
//! meta length, meta (UTF-8 TOML)
//! blob count
//! per blob: name length, name (UTF-8), ndim, extents..., f64 data (LE)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CDNetConfig;
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::nn::ParamStore;
use crate::ssl::HeadConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDN1";

/// The config record of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub step: usize,
    pub model: CDNetConfig,
    pub head: Option<HeadConfig>,
}

impl CheckpointMeta {
    pub fn arch(&self) -> Result<Arch> {
        Arch::parse(&self.arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blobs: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            blobs: Vec::new(),
        }
    }

    /// Appends every parameter of `store` as `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.blobs.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.blobs.push((name.to_string(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("checkpoint blob {name}")))
    }

    /// Overwrites every parameter of `store` from the blobs `prefix/name`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let name = format!("{prefix}/{}", store.name(i));
            let t = self
                .get(&name)
                .map_err(|_| Error::Integrity(format!("checkpoint lacks {name}")))?;
            if t.shape() != store.tensor(i).shape() {
                return Err(Error::Integrity(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.tensor(i).shape()
                )));
            }
            *store.tensor_mut(i) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta)
            .map_err(|e| Error::format("checkpoint", format!("meta: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.blobs.len())?;
        for (name, t) in &self.blobs {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic (expected CDN1)"));
        }
        let meta: CheckpointMeta = toml::from_str(&r.string()?)
            .map_err(|e| Error::format("checkpoint", format!("meta: {e}")))?;
        meta.model.validate()?;
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes after last blob"));
        }
        Ok(Checkpoint { meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
