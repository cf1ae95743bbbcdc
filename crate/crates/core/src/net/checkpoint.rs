//! Binary parameter container with a JSON sidecar holding the config.
//!
//! Layout (little-endian): magic, `u32` version, `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, four `u64` dims and the `f64`
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Network, NetworkConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ERRMAPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Parameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel().checked_mul(8).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor4::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Parameters::new(entries)
}

/// Writes `path` and `path.json`.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net.params()))?;
    fs::write(sidecar(path), serde_json::to_string_pretty(net.config())?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let side = sidecar(path);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", side.display())))?;
    let config: NetworkConfig = serde_json::from_str(&text)?;
    Network::from_parameters(&config, decode(&bytes)?)
}
