//! Binary formats.
//!
//! CPV1 volume: magic `CPV1`, u32 LE dimension count D, D x u64 LE dims,
//! then raw f64 LE data, row-major.
//!
//! CPT1 TT archive: magic `CPT1`, u32 LE D, (D+1) x u32 LE ranks,
//! D x u64 LE mode sizes, then cores d = 1..D as contiguous f64 LE,
//! each row-major in (r_{d-1}, I_d, r_d).

use std::io::{Read, Write};

use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tt::{Core, TTTensor};

const CPV1_MAGIC: &[u8; 4] = b"CPV1";
const CPT1_MAGIC: &[u8; 4] = b"CPT1";

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format(format!("truncated file reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_cpv1(w: &mut impl Write, t: &DenseTensor) -> Result<()> {
    w.write_all(CPV1_MAGIC)?;
    w.write_all(&(t.shape().ndim() as u32).to_le_bytes())?;
    for &d in t.shape().dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cpv1(r: &mut impl Read) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != CPV1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected CPV1")));
    }
    let ndim = read_u32(r, "dimension count")? as usize;
    if ndim == 0 || ndim > 64 {
        return Err(Error::Format(format!("implausible dimension count {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r, "dims")? as usize);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let data = read_f64_vec(r, shape.count(), "volume data")?;
    DenseTensor::new(shape, data)
}

pub fn write_cpt1(w: &mut impl Write, t: &TTTensor) -> Result<()> {
    w.write_all(CPT1_MAGIC)?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &r in &t.ranks() {
        w.write_all(&(r as u32).to_le_bytes())?;
    }
    for &n in &t.dims() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for core in t.cores() {
        for &v in &core.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_cpt1(r: &mut impl Read) -> Result<TTTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != CPT1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected CPT1")));
    }
    let ndim = read_u32(r, "dimension count")? as usize;
    if ndim == 0 || ndim > 4096 {
        return Err(Error::Format(format!("implausible dimension count {ndim}")));
    }
    let mut ranks = Vec::with_capacity(ndim + 1);
    for _ in 0..=ndim {
        ranks.push(read_u32(r, "ranks")? as usize);
    }
    if ranks[0] != 1 || ranks[ndim] != 1 {
        return Err(Error::Format("boundary ranks must be 1".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r, "mode sizes")? as usize);
    }
    let mut cores = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let len = ranks[d] * dims[d] * ranks[d + 1];
        let data = read_f64_vec(r, len, "core data")?;
        cores.push(
            Core::from_data(ranks[d], dims[d], ranks[d + 1], data)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    TTTensor::new(cores).map_err(|e| Error::Format(e.to_string()))
}
