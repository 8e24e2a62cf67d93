//! Binary containers for tensors.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SKRCKPT1"
//! count        u32       number of entries
//! entry*       sorted by path (byte order):
//!   path_len   u32
//!   path       path_len bytes, UTF-8 ("sgtm.atd.q_proj.weight")
//!   rank       u32
//!   extents    rank × u64
//!   data       (product of extents) × f64, row-major
//! ```
//!
//! A single-tensor file uses magic `"SKRTNSR1"` followed by `rank`,
//! `extents` and `data` exactly as one checkpoint entry without the path.

use std::collections::BTreeMap;
use std::path::Path;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKRCKPT1";
pub const TENSOR_MAGIC: &[u8; 8] = b"SKRTNSR1";

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let payload: usize = entries.values().map(|t| t.numel() * 8 + 64).sum();
    let mut buf = Vec::with_capacity(16 + payload);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (path, t) in entries {
        buf.extend_from_slice(&(path.len() as u32).to_le_bytes());
        buf.extend_from_slice(path.as_bytes());
        put_tensor(&mut buf, t);
    }
    buf
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + t.numel() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    put_tensor(&mut buf, t);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(format!("implausible rank {rank} at byte {}", self.pos - 4));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = numel_of(&shape);
        let raw = self.take(n.checked_mul(8).ok_or("extent overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| e.to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Tensor>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic, not a checkpoint".into());
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format!("non-UTF-8 path before byte {}", r.pos))?
            .to_string();
        let t = r.tensor()?;
        if out.insert(path.clone(), t).is_some() {
            return Err(format!("duplicate entry {path}"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != TENSOR_MAGIC {
        return Err("bad magic, not a tensor file".into());
    }
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(t)
}

pub fn save_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(entries)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}
