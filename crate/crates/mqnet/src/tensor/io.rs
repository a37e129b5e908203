//! Flat binary tensor format used for checkpoints.
//!
//! Layout: magic bytes "MQT1", u32 rank, u32 per dimension, then the
//! values as little-endian f64 regardless of the in-memory precision.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{MqError, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MQT1";

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MqError::Io(format!("bad magic {magic:?}, expected \"MQT1\"")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank == 0 || rank > 8 {
        return Err(MqError::Io(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| MqError::Io("dimension overflow".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    let mut buf8 = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf8)?;
        data.push(S::from_f64(f64::from_le_bytes(buf8)));
    }
    Tensor::new(&shape, data)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_tensor(&mut f, t)
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = fs::File::open(path)?;
    read_tensor(&mut f)
}

/// Writes a set of named tensors as `<dir>/<name>.mqt`.
pub fn save_named<S: Scalar>(dir: &Path, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in tensors {
        save_tensor(&dir.join(format!("{name}.mqt")), t)?;
    }
    Ok(())
}

/// Loads every `*.mqt` in a directory, sorted by name.
pub fn load_named<S: Scalar>(dir: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mqt"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for p in files {
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MqError::Io(format!("bad checkpoint file name {p:?}")))?
            .to_string();
        out.push((name, load_tensor(&p)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let t = Tensor::<f64>::from_f64s(&[2, 3], &[1.5, -2.25, 0.0, 1e-300, 3.7, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MQT1");
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f64>::zeros(&[2])).unwrap();
        buf[0] = b'X';
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_fails() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f64>::zeros(&[4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn named_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::<f64>::from_f64s(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[1], &[9.0]).unwrap();
        save_named(dir.path(), &[("w.a".into(), &a), ("w.b".into(), &b)]).unwrap();
        let loaded = load_named::<f64>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "w.a");
        assert!(loaded[0].1.bit_eq(&a));
        assert!(loaded[1].1.bit_eq(&b));
    }
}
