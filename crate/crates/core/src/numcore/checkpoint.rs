//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "SLCK" | u32 version | u64 config_hash | u32 n_entries
//!   then per entry: u32 name_len | name bytes | u32 ndims | ndims x u64 dims
//!   | rows*cols f64 values
//!
//! Round-trips are bit-exact: values are written as raw f64 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::params::ParamSet;
use crate::numcore::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SLCK";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &ParamSet, config_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for e in params.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(e.values.rows as u64).to_le_bytes())?;
        w.write_all(&(e.values.cols as u64).to_le_bytes())?;
        for &v in &e.values.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, u64)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_hash = read_u64(&mut r)?;
    let n_entries = read_u32(&mut r)? as usize;

    let mut params = ParamSet::new();
    for _ in 0..n_entries {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Config(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Config(format!("checkpoint name not utf-8: {e}")))?;
        let ndims = read_u32(&mut r)? as usize;
        if ndims != 2 {
            return Err(Error::Config(format!(
                "entry {name}: expected 2 dims, got {ndims}"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Config(format!("entry {name}: dim overflow")))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.add(&name, Tensor::from_vec(rows, cols, data));
    }
    Ok((params, config_hash))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = ParamSet::new();
        p.add(
            "w",
            Tensor::from_vec(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.3]),
        );
        p.add("b", Tensor::from_vec(1, 1, vec![0.3 + 0.6]));
        save(&path, &p, 0xDEADBEEF).unwrap();
        let (q, h) = load(&path).unwrap();
        assert_eq!(h, 0xDEADBEEF);
        assert_eq!(q.len(), 2);
        for (a, b) in p.entries().iter().zip(q.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values.rows, b.values.rows);
            assert_eq!(a.values.cols, b.values.cols);
            for (x, y) in a.values.data.iter().zip(&b.values.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // Saving the loaded set again produces identical bytes.
        let path2 = dir.path().join("p2.ckpt");
        save(&path2, &q, h).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
