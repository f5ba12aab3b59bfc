//! "SCKP" checkpoint format: a named f32 tensor table plus an embedded
//! config snapshot.
//!
//! Layout: ASCII magic "SCKP"; u32 LE version = 1; u32 tensor count; per
//! tensor u16 name length, UTF-8 name, u8 rank, rank x u32 dims, row-major
//! f32 LE payload; finally u32 config byte length and the config text.

use std::path::Path;

use crate::embednet::ParamSet;
use crate::error::{Error, Result};
use crate::substrate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub config_text: String,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.entries.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors.entries {
        if !t.all_finite() {
            return Err(Error::numeric(format!("checkpoint: non-finite tensor `{name}`")));
        }
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::argument(format!("checkpoint: tensor `{name}` exceeds format limits")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(ckpt.config_text.as_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, format!("truncated reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = ParamSet::default();
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name_pos = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(name_pos as u64, "tensor name not UTF-8"))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_pos = cur.pos;
        let payload = cur.take(n * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format(payload_pos as u64, format!("tensor {i}: {e}")))?;
        tensors.entries.insert(name, t);
    }
    if tensors.entries.len() != count {
        return Err(Error::format(cur.pos as u64, "duplicate tensor names"));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_pos = cur.pos;
    let config_text = std::str::from_utf8(cur.take(cfg_len, "config text")?)
        .map_err(|_| Error::format(cfg_pos as u64, "config text not UTF-8"))?
        .to_string();
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after config"));
    }
    Ok(Checkpoint { tensors, config_text })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::config::write_atomic(path, &to_bytes(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
