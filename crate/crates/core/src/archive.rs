//! Named-tensor archive used for checkpoints and datasets.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    b"EVST"
//! version  u32 (currently 1)
//! count    u32
//! count × {
//!     name_len u32, name UTF-8 bytes,
//!     rank u32, dims u64 × rank,
//!     values f64 × product(dims)
//! }
//! ```
//!
//! Values are written as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVST";
pub const VERSION: u32 = 1;

// Refuse absurd headers before allocating for them.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 16;

pub fn write_archive<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name}: dims overflow")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_archive(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_archive(BufReader::new(File::open(path)?))
}
