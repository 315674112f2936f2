//! Flat binary container for weight sets. All integers little-endian:
//!
//! ```text
//! header:  spec_hash u64 | entry_count u32
//! entry:   name_len u32 | name (utf-8) | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! The only dtype is `0` (32-bit IEEE float). The encoded length is exactly
//! what the federation ledger meters per transfer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{WeightEntry, WeightSet};
use crate::tensor::Tensor;

pub const DTYPE_F32: u8 = 0;

/// Exact byte length [`encode`] produces for `weights`.
pub fn encoded_len(weights: &WeightSet) -> usize {
    12 + weights
        .entries
        .iter()
        .map(|e| 4 + e.name.len() + 2 + 4 * e.tensor.shape().len() + 4 * e.tensor.numel())
        .sum::<usize>()
}

pub fn encode(weights: &WeightSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(weights));
    out.extend_from_slice(&weights.spec_hash.to_le_bytes());
    let count = u32::try_from(weights.entries.len()).map_err(|_| Error::Container("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in &weights.entries {
        let shape = e.tensor.shape();
        let name_len =
            u32::try_from(e.name.len()).map_err(|_| Error::Container(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Container(format!("{}: rank {} too large", e.name, shape.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Container(format!("{}: dim {d} too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), encoded_len(weights));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Container(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let spec_hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Container("entry name is not utf-8".into()))?
            .to_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Container(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container(format!("{name}: shape overflows")))?;
        let payload_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Container(format!("{name}: shape overflows")))?;
        let payload = r.take(payload_len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(WeightEntry {
            name,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(WeightSet { spec_hash, entries })
}

pub fn save(weights: &WeightSet, path: &Path) -> Result<()> {
    fs::write(path, encode(weights)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<WeightSet> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
