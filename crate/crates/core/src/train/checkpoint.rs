//! Checkpoint files, little-endian throughout:
//!
//! ```text
//! magic "DBTC" | version u32 | tensor count u32
//! count × ( name length u16 | name bytes | rank u8 | rank × dim u32 | f32 payload )
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBTC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every tensor
/// decodes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let data = c
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
