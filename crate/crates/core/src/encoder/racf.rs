//! RACF precomputed-feature files.
//!
//! Layout (little-endian):
//! - magic `b"RACF"`
//! - u32 version (= 1)
//! - u32 T, u32 S1, u32 S2, u32 d_f
//! - T·S1·S2·d_f f32 values, row-major `(t, s1, s2, c)`

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::{Error, Result};

pub const RACF_MAGIC: &[u8; 4] = b"RACF";
pub const RACF_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_racf(w: &mut impl Write, features: &Array4<f64>) -> Result<()> {
    let (t, s1, s2, c) = features.dim();
    w.write_all(RACF_MAGIC)?;
    for v in [RACF_VERSION, t as u32, s1 as u32, s2 as u32, c as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(features.len() * 4);
    for &v in features.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_racf(r: &mut impl Read) -> Result<Array4<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RACF_MAGIC {
        return Err(Error::Format("not a RACF file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != RACF_VERSION {
        return Err(Error::Format(format!("unsupported RACF version {version}")));
    }
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?].map(|d| d as usize);
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format("RACF dims overflow".into()))?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("RACF payload truncated".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after RACF payload".into()));
    }
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).expect("length checked"))
}

pub fn save_racf(path: impl AsRef<Path>, features: &Array4<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_racf(&mut f, features)?;
    f.flush()?;
    Ok(())
}

pub fn load_racf(path: impl AsRef<Path>) -> Result<Array4<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_racf(&mut f)
}
