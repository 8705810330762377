//! Versioned binary checkpoint format: named tensors with f32 payloads,
//! little-endian throughout.
//!
//! Layout: magic `b"CCKPT\0"`, `u32` version, `u32` tensor count, then per
//! tensor: `u32` name length + UTF-8 name, `u32` rank, `u64` extents,
//! `f32` payload.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"CCKPT\0";
const VERSION: u32 = 1;

pub fn save<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!("{} is not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Config("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(S::of(f32::from_le_bytes(b) as f64));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let entries = vec![
            ("a.w".to_string(), Tensor::<f32>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap()),
            ("b".to_string(), Tensor::<f32>::from_f64(&[1], &[-0.5]).unwrap()),
        ];
        save(&path, &entries).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), entries[0].1.data());
        assert_eq!(back[1].1.data(), entries[1].1.data());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"CCKPT\0\x01\x00").unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPTxxxxxxxxxxxx").unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
