//! The `MTEN` tensor container.
//!
//! Single tensor:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "MTEN"
//! 4       4         version, u32 LE = 1
//! 8       1         dtype code (0 = f32 LE)
//! 9       1         rank r
//! 10      8 * r     extents, u64 LE
//! ..      4 * prod  row-major payload
//! ```
//!
//! Named-entry directory (checkpoints): the same first 9 bytes, rank byte
//! `0xFF`, then a u32 LE entry count, then per entry a u32 LE name length,
//! the UTF-8 name, and a tensor record (dtype, rank, extents, payload)
//! laid out as above without magic or version.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MTEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DIRECTORY_RANK: u8 = 0xFF;

/// Header size of a single tensor of the given rank.
pub const fn header_len(rank: usize) -> usize {
    4 + 4 + 1 + 1 + 8 * rank
}

/// A dense `f32` array of any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NdArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "extents {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(NdArray { dims, data })
    }

    /// Rank ≤ 4 arrays become tensors with leading extents of 1.
    pub fn into_tensor(self) -> Result<Tensor> {
        if self.dims.len() > 4 {
            return Err(Error::shape(format!(
                "rank {} does not fit a 4-d tensor",
                self.dims.len()
            )));
        }
        let mut d = [1usize; 4];
        d[4 - self.dims.len()..].copy_from_slice(&self.dims);
        Tensor::new(Shape::from_dims(d), self.data)
    }
}

impl From<&Tensor> for NdArray {
    fn from(t: &Tensor) -> Self {
        NdArray {
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

fn put_record(out: &mut Vec<u8>, a: &NdArray) {
    out.push(DTYPE_F32);
    out.push(a.dims.len() as u8);
    for &d in &a.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(a.data.len() * 4);
    for v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(a: &NdArray) -> Vec<u8> {
    assert!(a.dims.len() < DIRECTORY_RANK as usize);
    let mut out = Vec::with_capacity(header_len(a.dims.len()) + 4 * a.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_record(&mut out, a);
    out
}

pub fn encode_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a NdArray)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(DIRECTORY_RANK);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_record(&mut out, a);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(self.err(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {available}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn preamble(&mut self) -> Result<()> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(self.err(0, format!("bad magic {magic:?}, expected \"MTEN\"")));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(self.err(4, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn dtype(&mut self) -> Result<()> {
        let at = self.pos;
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(self.err(at, format!("unknown dtype code {dtype}")));
        }
        Ok(())
    }

    fn body(&mut self, rank: usize) -> Result<NdArray> {
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let d = self.u64("extent")?;
            dims.push(
                usize::try_from(d).map_err(|_| self.err(at, format!("extent {d} too large")))?,
            );
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.err(self.pos, "payload size overflows"))?;
        let payload = self.take(count, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(NdArray { dims, data })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<NdArray> {
    let mut r = Reader { bytes, pos: 0 };
    r.preamble()?;
    r.dtype()?;
    let at = r.pos;
    let rank = r.u8("rank")?;
    if rank == DIRECTORY_RANK {
        return Err(r.err(at, "file is a named-entry directory, not a single tensor"));
    }
    let a = r.body(rank as usize)?;
    r.finish()?;
    Ok(a)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, NdArray)>> {
    let mut r = Reader { bytes, pos: 0 };
    r.preamble()?;
    r.dtype()?;
    let at = r.pos;
    if r.u8("rank")? != DIRECTORY_RANK {
        return Err(r.err(at, "file is a single tensor, not a named-entry directory"));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(at, "entry name is not UTF-8"))?
            .to_owned();
        r.dtype()?;
        let rank = r.u8("rank")? as usize;
        out.push((name, r.body(rank)?));
    }
    r.finish()?;
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_array(path: impl AsRef<Path>, a: &NdArray) -> Result<()> {
    write(path.as_ref(), &encode(a))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<NdArray> {
    decode(&read(path.as_ref())?)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save_array(path, &NdArray::from(t))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    load_array(path)?.into_tensor()
}

pub fn save_entries<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let arrays: Vec<(&str, NdArray)> = entries
        .into_iter()
        .map(|(n, t)| (n, NdArray::from(t)))
        .collect();
    write(
        path.as_ref(),
        &encode_entries(arrays.iter().map(|(n, a)| (*n, a))),
    )
}

pub fn load_entries(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_entries(&read(path.as_ref())?)?
        .into_iter()
        .map(|(n, a)| Ok((n, a.into_tensor()?)))
        .collect()
}
