//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVSSCKPT"  u32 version  u32 count
//! count × { u32 name_len  name (UTF-8)  u8 rank  rank × u64 extent  numel × f32 }
//! ```
//!
//! Tensors are written in name order, so equal stores encode to equal bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVSSCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() as usize * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses a whole checkpoint; any malformation is an error.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = usize::try_from(r.u64("extent")?).map_err(|_| Error::Checkpoint("extent overflow".into()))?;
            shape.push(e);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
        let Some((numel, nbytes)) = numel else {
            return Err(Error::Checkpoint(format!("tensor `{name}` is too large")));
        };
        let raw = r.take(nbytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), numel);
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if store.get(&name).is_ok() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes, found {}",
            r.pos,
            bytes.len()
        )));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path)?)
}

impl Model {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save(path, self.params())
    }

    /// Loads parameters; the model is untouched unless the whole file parses
    /// and matches its layout.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let store = load(path)?;
        self.set_params(store)
    }
}
