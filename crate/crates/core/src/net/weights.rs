//! Binary weight files.
//!
//! Layout (little-endian): magic `RUNETW01`, `u32` version, 32-byte layout
//! hash, `u32` parameter count, then per parameter `u32` name length, name
//! bytes, `u32` rank, `rank` x `u32` dims and the raw `f32` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::Network;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RUNETW01";
const VERSION: u32 = 1;

/// SHA-256 over parameter names and shapes. Dilations do not enter, so
/// weights move freely between receptive-field variants.
pub fn layout_hash(net: &Network) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in net.params() {
        h.update(p.name.as_bytes());
        h.update([0]);
        for d in p.value.shape().as_array() {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn layout_hash_hex(net: &Network) -> String {
    layout_hash(net).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.count_parameters() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&layout_hash(net));
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.value.shape().as_array();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::WeightFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Overwrite `net`'s parameters from `bytes`; the layout must match exactly.
pub fn from_bytes(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::WeightFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    if r.take(32)? != layout_hash(net) {
        return Err(Error::WeightFile("layout hash does not match this network".into()));
    }
    let count = r.u32()? as usize;
    if count != net.params().len() {
        return Err(Error::WeightFile(format!("{count} parameters, expected {}", net.params().len())));
    }
    for p in net.params_mut() {
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != p.name.as_bytes() {
            return Err(Error::WeightFile(format!("expected `{}`", p.name)));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if dims != p.value.shape().as_array() {
            return Err(Error::WeightFile(format!("`{}` has dims {dims:?}", p.name)));
        }
        let raw = r.take(p.value.len() * 4)?;
        for (v, c) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(net: &mut Network, path: &Path) -> Result<()> {
    from_bytes(net, &fs::read(path)?)
}
