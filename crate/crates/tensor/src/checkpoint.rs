//! Parameter checkpoint container.
//!
//! Layout (little-endian):
//! - magic `b"DJSC"`
//! - format version: u32
//! - zero or more records until end of file:
//!   - name length: u32, then that many UTF-8 bytes
//!   - rank: u32, then `rank` dims as u32
//!   - `product(dims)` values as f32

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DJSC";
pub const VERSION: u32 = 1;

/// Size in bytes of the file header (magic and version).
pub const HEADER_BYTES: usize = 8;

/// Exact encoded size of a store, without encoding it.
pub fn encoded_len<T: Scalar>(store: &ParamStore<T>) -> usize {
    HEADER_BYTES
        + store
            .iter()
            .map(|p| 4 + p.name.len() + 4 + 4 * p.value.rank() + 4 * p.value.numel())
            .sum::<usize>()
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(encoded_len(store));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&to_u32(p.value.rank(), "rank")?.to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| TensorError::Checkpoint { offset: 0, msg: format!("{what} {v} exceeds u32") })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TensorError::Checkpoint {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            }
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn err(&self, msg: impl Into<String>) -> TensorError {
        TensorError::Checkpoint { offset: self.pos as u64, msg: msg.into() }
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(TensorError::Checkpoint { offset: 0, msg: "bad magic".into() });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| cur.err("parameter name is not UTF-8"))?
            .to_owned();
        if store.find(&name).is_some() {
            return Err(cur.err(format!("duplicate parameter `{name}`")));
        }
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| cur.err(format!("dimensions {dims:?} overflow")))?;
        let raw = cur.take(numel * 4, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.push_raw(name, Tensor::new(dims, data)?);
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
