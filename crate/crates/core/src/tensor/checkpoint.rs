//! Parameter checkpoint file.
//!
//! Layout: magic "MTCW", u32 LE version, u32 LE param count, then per
//! param: u16 LE name length, UTF-8 name, u8 rank, rank × u32 LE dims,
//! float64 LE values. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Param, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCW";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &[&Param], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Param(format!("param name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Param(format!("rank too large: {}", shape.len())));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r, "param count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("param {i}: name is not UTF-8")))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut r, &mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        if rank == 0 {
            return Err(Error::Format(format!("param {name}: zero rank")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "values")?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?,
        ));
    }
    // Trailing garbage means the file does not match its own header.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last param".into()));
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}
