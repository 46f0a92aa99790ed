//! Flat binary parameter snapshots.
//!
//! Layout: magic `PFTN`, version u32 LE, then per tensor until EOF:
//! name length (u32 LE), UTF-8 name bytes, rank (u32 LE), one u32 LE per
//! dimension, then the values as little-endian f64 in row-major order.
//! Tensors are written sorted by name so identical parameter sets always
//! produce identical bytes.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFTN";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum SnapshotError {
    Io(io::Error),
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    Truncated(&'static str),
    BadName(std::string::FromUtf8Error),
    BadTensor(String),
}

impl fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "snapshot io error: {}", e),
            Self::BadMagic(m) => write!(f, "bad snapshot magic {:?}", m),
            Self::UnsupportedVersion(v) => write!(f, "unsupported snapshot version {}", v),
            Self::Truncated(what) => write!(f, "snapshot truncated while reading {}", what),
            Self::BadName(e) => write!(f, "snapshot tensor name is not utf-8: {}", e),
            Self::BadTensor(name) => write!(f, "inconsistent tensor entry for '{}'", name),
        }
    }
}

impl std::error::Error for SnapshotError {}

impl From<io::Error> for SnapshotError {
    fn from(e: io::Error) -> Self {
        SnapshotError::Io(e)
    }
}

/// Serialize named tensors; entries are sorted by name before writing.
pub fn write_snapshot<W: Write>(
    mut w: W,
    tensors: &[(String, &Tensor)],
) -> Result<(), SnapshotError> {
    let mut entries: Vec<&(String, &Tensor)> = tensors.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_snapshot(path: &Path, tensors: &[(String, &Tensor)]) -> Result<(), SnapshotError> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Read a snapshot back as (name, tensor) pairs in file order.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, SnapshotError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(SnapshotError::Truncated("header"));
    }
    if &buf[0..4] != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(&buf[0..4]);
        return Err(SnapshotError::BadMagic(m));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let mut pos = 8;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<usize, SnapshotError> {
        let start = *pos;
        if start + n > buf.len() {
            return Err(SnapshotError::Truncated(what));
        }
        *pos += n;
        Ok(start)
    };
    while pos < buf.len() {
        let at = take(&mut pos, 4, "name length")?;
        let name_len = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        let at = take(&mut pos, name_len, "name bytes")?;
        let name = String::from_utf8(buf[at..at + name_len].to_vec())
            .map_err(SnapshotError::BadName)?;
        let at = take(&mut pos, 4, "rank")?;
        let rank = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = take(&mut pos, 4, "dims")?;
            shape.push(u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let at = take(&mut pos, numel * 8, "values")?;
        let data: Vec<f64> = buf[at..at + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|_| SnapshotError::BadTensor(name.clone()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn load_snapshot(path: &Path) -> Result<Vec<(String, Tensor)>, SnapshotError> {
    let bytes = fs::read(path)?;
    read_snapshot(&bytes[..])
}

/// Snapshot bytes for a parameter list, for bit-exact freeze comparisons.
pub fn snapshot_bytes(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, tensors).expect("in-memory snapshot write");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-12, 7.25]).unwrap();
        let b = Tensor::vector(vec![0.5, 0.25]);
        let pairs = vec![("beta".to_string(), &b), ("alpha".to_string(), &a)];
        let bytes = snapshot_bytes(&pairs);
        assert_eq!(&bytes[0..4], MAGIC);
        let back = read_snapshot(&bytes[..]).unwrap();
        // sorted by name on write
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), a.data());
        assert_eq!(back[1].0, "beta");
        assert_eq!(back[1].1.data(), b.data());
    }

    #[test]
    fn identical_params_produce_identical_bytes() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let p1 = vec![("x".to_string(), &a), ("y".to_string(), &a)];
        let p2 = vec![("y".to_string(), &a), ("x".to_string(), &a)];
        assert_eq!(snapshot_bytes(&p1), snapshot_bytes(&p2));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let err = read_snapshot(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, SnapshotError::BadMagic(_)));

        let a = Tensor::vector(vec![1.0]);
        let pairs = vec![("x".to_string(), &a)];
        let bytes = snapshot_bytes(&pairs);
        let err = read_snapshot(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, SnapshotError::Truncated(_)));
    }
}
