//! Binary checkpoint format.
//!
//! ```text
//! "PCAT" | version u8 = 1 | count u32
//! per parameter: name_len u16 | name utf-8 | rank u8 | dims u32 × rank | values f64 × prod(dims)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PCAT";
pub const VERSION: u8 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for p in store.iter() {
        let name = p.id.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {}", p.id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {}", p.id)))?;
        out.push(rank);
        for &d in p.value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large for {}", p.id)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into `(name, value)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    r.pos = 4;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("parameter {i}: name is not utf-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Copies decoded values into a store whose names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        let first = store
            .iter()
            .map(|p| p.id.as_str())
            .find(|id| !entries.iter().any(|(n, _)| n == id))
            .or_else(|| entries.get(store.len()).map(|(n, _)| n.as_str()))
            .unwrap_or("<none>")
            .to_string();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}; first mismatched parameter: {first}",
            entries.len(),
            store.len()
        )));
    }
    for ((name, value), p) in entries.iter().zip(store.iter()) {
        if *name != p.id || value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "first mismatched parameter: {} {:?} (checkpoint has {} {:?})",
                p.id,
                p.value.shape(),
                name,
                value.shape()
            )));
        }
    }
    for ((_, value), p) in entries.into_iter().zip(store.iter_mut()) {
        p.value = value;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_into(store, decode(&bytes)?)
}
