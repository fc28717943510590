//! Binary tensor file format ("RDTN") and checkpoint directories.
//!
//! Layout: magic `RDTN`, u8 version, u8 rank, rank × u64 LE dims, then the
//! row-major f32 LE payload. A checkpoint is a directory holding one `.rdtn`
//! file per named parameter plus a JSON sidecar written by the model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDTN";
const VERSION: u8 = 1;

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + t.shape().len() * 8 + t.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: missing RDTN magic",
            path.display()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported RDTN version {}",
            path.display(),
            bytes[4]
        )));
    }
    let rank = bytes[5] as usize;
    let header = 6 + rank * 8;
    if bytes.len() < header {
        return Err(Error::Integrity(format!(
            "{}: truncated dimension header",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut d = [0u8; 8];
        d.copy_from_slice(&bytes[6 + i * 8..6 + (i + 1) * 8]);
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + numel * 4 {
        return Err(Error::Integrity(format!(
            "{}: payload length {} does not match shape {:?}",
            path.display(),
            bytes.len() - header,
            shape
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let mut v = [0u8; 4];
        v.copy_from_slice(&bytes[header + i * 4..header + (i + 1) * 4]);
        data.push(f32::from_le_bytes(v));
    }
    Tensor::new(shape, data)
}

/// Write a named parameter map as `<dir>/params/<name>.rdtn`.
pub fn write_param_dir(dir: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir)?;
    for (name, t) in params {
        write_tensor(&pdir.join(format!("{name}.rdtn")), t)?;
    }
    Ok(())
}

pub fn read_param_dir(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let pdir = dir.join("params");
    let mut params = BTreeMap::new();
    for entry in fs::read_dir(&pdir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("rdtn") {
            continue;
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad parameter file name {}", path.display())))?
            .to_string();
        params.insert(name, read_tensor(&path)?);
    }
    if params.is_empty() {
        return Err(Error::Format(format!(
            "{}: checkpoint contains no parameters",
            dir.display()
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tensor_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rdtn");
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.25, 3e-8, 0.0, -1.0, 42.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rdtn");
        fs::write(&path, b"NOPE\x01\x01").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rdtn");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn param_dir_round_trip() {
        let dir = tempdir().unwrap();
        let mut params = BTreeMap::new();
        params.insert("enc.w".to_string(), Tensor::full(vec![2, 2], 0.5));
        params.insert("dec.b".to_string(), Tensor::full(vec![1, 4], -1.0));
        write_param_dir(dir.path(), &params).unwrap();
        let back = read_param_dir(dir.path()).unwrap();
        assert_eq!(params, back);
    }
}
