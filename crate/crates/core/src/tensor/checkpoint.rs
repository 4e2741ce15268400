//! Named-array container for network parameters.
//!
//! ```text
//! u32 count
//! repeated count times:
//!   u32 name_len, name (UTF-8)
//!   b"MTEN", version 0x01, dtype 0x01 (f32), u8 ndim, 0x00
//!   ndim x u32 dims
//!   payload: prod(dims) x f32
//! ```
//! All integers and floats little-endian. No trailing bytes.

use std::fs;
use std::path::Path;

use super::array::NdArray;
use crate::error::{Error, Result};

const ARRAY_MAGIC: &[u8; 4] = b"MTEN";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x01;

pub fn encode_arrays(arrays: &[(String, NdArray<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(ARRAY_MAGIC);
        out.extend_from_slice(&[VERSION, DTYPE_F32, a.ndim() as u8, 0]);
        for &d in a.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, NdArray<f32>)>> {
    let mut r = Reader { bytes, at: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("array name is not UTF-8: {e}")))?
            .to_string();
        if r.take(4)? != ARRAY_MAGIC {
            return Err(Error::Format(format!("bad array magic for {name:?}")));
        }
        let head = r.take(4)?;
        if head[0] != VERSION {
            return Err(Error::Unsupported(format!("array version {}", head[0])));
        }
        if head[1] != DTYPE_F32 {
            return Err(Error::Unsupported(format!("array dtype code {:#04x}", head[1])));
        }
        let ndim = usize::from(head[2]);
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("array size overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, NdArray::from_vec(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.at
        )));
    }
    Ok(out)
}

pub fn save_arrays(path: impl AsRef<Path>, arrays: &[(String, NdArray<f32>)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_arrays(arrays)).map_err(|e| Error::io(path, e))
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<Vec<(String, NdArray<f32>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_arrays(&bytes)
}
