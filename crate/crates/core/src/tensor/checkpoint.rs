//! `LBK1` parameter checkpoints: the magic, then for every parameter its
//! name (u32 LE length + UTF-8), rank (u32 LE), extents (u64 LE each) and
//! the values as little-endian f64.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"LBK1";

pub fn write_checkpoint<T: Real, W: Write>(out: &mut W, params: &[(String, Tensor<T>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))
}

pub fn read_checkpoint<T: Real, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact_or(&mut cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not an LBK1 checkpoint".into()));
    }
    let mut params = Vec::new();
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    while !cur.is_empty() {
        read_exact_or(&mut cur, &mut u32b, "name length")?;
        let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
        read_exact_or(&mut cur, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        read_exact_or(&mut cur, &mut u32b, "rank")?;
        let rank = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_or(&mut cur, &mut u64b, "extent")?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            read_exact_or(&mut cur, &mut u64b, &name)?;
            data.push(T::lit(f64::from_le_bytes(u64b)));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    Ok(params)
}
