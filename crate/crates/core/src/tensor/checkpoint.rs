//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NICECKPT" | version: u32 | record*
//! record = path_len: u32 | path: UTF-8 | rank: u32 | extents: u64 × rank | values: f64 × product(extents)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor};
use crate::error::{NiceError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NICECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ParamSet, mut out: impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (path, entry) in params.iter() {
        let t = &entry.tensor;
        out.write_all(&(path.len() as u32).to_le_bytes())?;
        out.write_all(path.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<String> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

/// Parses a container; every entry comes back trainable.
pub fn read_checkpoint(mut input: impl Read, origin: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |detail: String| NiceError::format("checkpoint", origin, detail);
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8).ok_or_else(|| bad("missing magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = cur.u32().ok_or_else(|| bad("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut params = ParamSet::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32().ok_or_else(|| bad("truncated record header".into()))? as usize;
        let name = cur.take(name_len).ok_or_else(|| bad("truncated path".into()))?;
        let name = std::str::from_utf8(name).map_err(|e| bad(format!("path is not UTF-8: {e}")))?.to_string();
        let rank = cur.u32().ok_or_else(|| bad(format!("{name}: truncated rank")))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64().ok_or_else(|| bad(format!("{name}: truncated extents")))?;
            shape.push(usize::try_from(d).map_err(|_| bad(format!("{name}: extent {d} too large")))?);
        }
        let n: usize = shape.iter().product();
        let raw = cur
            .take(n.checked_mul(8).ok_or_else(|| bad(format!("{name}: payload size overflow")))?)
            .ok_or_else(|| bad(format!("{name}: truncated payload")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name, Tensor::new(&shape, values).map_err(|e| bad(e.to_string()))?);
    }
    Ok(params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file), path)
}

/// Hex SHA-256 of a byte stream.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
