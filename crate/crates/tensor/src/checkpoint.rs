//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMDM"            4 bytes magic
//! version           u32
//! count             u32   number of entries
//! per entry:
//!   name_len        u32
//!   name            name_len bytes of UTF-8
//!   rank            u32
//!   shape           rank x u64
//!   values          prod(shape) x f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMDM";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(tensors.len()).map_err(overflow)?.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&u32::try_from(bytes.len()).map_err(overflow)?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&u32::try_from(t.rank()).map_err(overflow)?.to_le_bytes())?;
        for &extent in t.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn overflow<E>(_: E) -> TensorError {
    TensorError::Checkpoint("entry too large for the container".into())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Checkpoint(format!("entry name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(overflow)?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| TensorError::Checkpoint(format!("`{name}`: shape overflows")))?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if out.insert(name.clone(), Tensor::new(&shape, values)?).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path)?;
    read_tensors(bytes.as_slice())
}
