//! Flat binary tensor blobs and checkpoint directories.
//!
//! Blob layout: 8-byte magic ("NKT1" zero-padded), u32 rank, u32 dims
//! (little-endian), then the values as little-endian f64. Round-trips are
//! bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: [u8; 8] = *b"NKT1\0\0\0\0";

pub fn write_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Contract(format!(
            "write_tensor: shape {:?} vs {} values",
            shape,
            data.len()
        )));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut f64buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Ok((shape, data))
}

pub fn save_tensor_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, shape, data)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

/// Write named tensors as `<name>.nkt` files under `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in entries {
        save_tensor_file(&dir.join(format!("{}.nkt", name)), t.shape(), &t.data())?;
    }
    Ok(())
}

/// Read every `*.nkt` under `dir` into a name-keyed map.
pub fn load_checkpoint(dir: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "nkt").unwrap_or(false) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format(format!("bad checkpoint file {:?}", path)))?
                .to_string();
            out.insert(stem, load_tensor_file(&path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!("no tensors found in {:?}", dir)));
    }
    Ok(out)
}

/// Copy loaded checkpoint values into live tensors by name.
pub fn restore_named(
    map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    entries: &[(String, Tensor)],
) -> Result<()> {
    for (name, t) in entries {
        let (shape, data) = map
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{}'", name)))?;
        if shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor '{}': checkpoint shape {:?} vs model shape {:?}",
                name,
                shape,
                t.shape()
            )));
        }
        t.set_data(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_bitwise() {
        let shape = vec![2, 3];
        let data = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &shape, &data).unwrap();
        let (s2, d2) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(shape, s2);
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(&buf[..4], b"NKT1");
        assert_eq!(buf.len(), 8 + 4 + 2 * 4 + 6 * 8);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"JUNKJUNK\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::constant(vec![3], vec![-1.0, 0.5, 9.0]);
        let entries = vec![("lin.w".to_string(), a.clone()), ("bn.mean".to_string(), b.clone())];
        save_checkpoint(dir.path(), &entries).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        a.set_data(&[0.0; 4]);
        restore_named(&loaded, &entries).unwrap();
        assert_eq!(a.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
