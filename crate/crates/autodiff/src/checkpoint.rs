//! `VDCP` parameter files: magic, `u32` version, `u32` entry count, then per
//! entry a length-prefixed UTF-8 name, `u32` rank, `u32` extents and `f32`
//! values, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"VDCP";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, store: &ParamStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| AutodiffError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| AutodiffError::Checkpoint(format!("truncated file: {e}")))?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic, not a parameter file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(AutodiffError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| AutodiffError::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(AutodiffError::Checkpoint(format!("`{name}`: bad rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|e| AutodiffError::Checkpoint(format!("`{name}`: truncated data: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| AutodiffError::Checkpoint(format!("`{name}`: {e}")))?;
        store.add(name, t);
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    read_params(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.05));
        s.add("b", Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap());
        let mut buf = Vec::new();
        write_params(&mut buf, &s).unwrap();
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&mut &b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut s = ParamStore::new();
        s.add("w", Tensor::<f32>::ones([4]));
        let mut buf = Vec::new();
        write_params(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_params(&mut buf.as_slice()).is_err());
    }
}
