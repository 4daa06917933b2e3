//! Binary parameter container.
//!
//! Layout, all integers little-endian: the 8-byte magic, a `u32` tensor count,
//! then per tensor a `u32` name length and UTF-8 name, a `u32` rank, `rank`
//! `u32` dims, a `u8` dtype code (0 = f64) and the raw f64 payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"FSVVLM01";
const DTYPE_F64: u8 = 0;

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.tensor.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

/// A decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let values = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(Entry { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Validates every record against the store before touching it.
pub fn apply_checkpoint(store: &mut ParamStore, entries: &[Entry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for ((_, p), e) in store.iter().zip(entries) {
        if p.name != e.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {}", p.name, e.name)));
        }
        if p.tensor.dims() != e.dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match model shape {:?}",
                e.name,
                e.dims,
                p.tensor.dims()
            )));
        }
    }
    let values: Vec<Vec<f64>> = entries.iter().map(|e| e.values.clone()).collect();
    store.restore(&values)
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    apply_checkpoint(store, &read_checkpoint(&bytes)?)
}
