//! Binary tensor interchange format.
//!
//! Layout: magic `NTAT`, u32 little-endian ndim, ndim×u32 dims, then the
//! row-major payload as f32 little-endian. The core computes in f64; files
//! store f32 and are widened on load. A bundle file (`NTAB`) holds named
//! tensors: u32 count, then per entry a u32 name length, the UTF-8 name, and
//! an embedded NTAT record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"NTAT";
const BUNDLE_MAGIC: &[u8; 4] = b"NTAB";

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Parse {
            detail: format!("bad tensor magic {magic:?}, expected \"NTAT\""),
        });
    }
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Parse {
            detail: format!("implausible ndim {ndim}"),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_bundle_to(w: &mut impl Write, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor_to(w, tensor)?;
    }
    Ok(())
}

pub fn read_bundle_from(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Parse {
            detail: format!("bad bundle magic {magic:?}, expected \"NTAB\""),
        });
    }
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Parse {
            detail: format!("bundle entry name is not UTF-8: {e}"),
        })?;
        entries.push((name, read_tensor_from(r)?));
    }
    Ok(entries)
}

pub fn write_bundle(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle_to(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_bundle_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn tensor_round_trips_at_f32_precision() {
        let mut rng = SplitMix64::new(11);
        let t = Tensor::rand_uniform(vec![3, 4, 2], -2.0, 2.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"NTAT");
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"NTAT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 16 + 6 * 4);
    }

    #[test]
    fn bundle_preserves_names_and_order() {
        let entries = vec![
            ("alpha".to_string(), Tensor::ones(vec![2])),
            ("beta".to_string(), Tensor::zeros(vec![1, 3])),
        ];
        let mut buf = Vec::new();
        write_bundle_to(&mut buf, &entries).unwrap();
        let back = read_bundle_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[1].0, "beta");
        assert_eq!(back[1].1.shape(), &[1, 3]);
    }

    #[test]
    fn truncated_input_is_a_parse_or_io_error() {
        let out = read_tensor_from(&mut &b"NTAT\x02\x00\x00\x00"[..]);
        assert!(out.is_err());
    }
}
