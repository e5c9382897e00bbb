//! Flat parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic    8 bytes  "CSFTCKPT"
//! version  u32      currently 1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u32 × ndim,
//!          data f32 LE × product(dims)
//! ```
//!
//! Entries are written in parameter registration order, so identical
//! parameters always produce identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

/// Overwrites every parameter of `params` from decoded entries, matching by
/// name and shape.
pub fn restore(params: &mut ParamStore, entries: &[Entry]) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            params.len()
        )));
    }
    for e in entries {
        let id = params
            .find(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter '{}'", e.name)))?;
        let requires_grad = params.get(id).requires_grad();
        let data = e.data.iter().map(|&v| v as f64).collect();
        params.replace(id, Tensor::new(e.shape.clone(), data)?.with_requires_grad(requires_grad))?;
    }
    Ok(())
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(params: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "checkpoint not found".into(),
        },
        _ => Error::Io(e),
    })?;
    restore(params, &decode(&bytes)?)
}
