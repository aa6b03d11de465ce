//! Binary tensor archive: the on-disk checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"SSDCATAR"
//! version 1 byte   0x01
//! repeat until EOF:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   dtype     u8   (0 = f32, 1 = f64)
//!   rank      u8
//!   shape     rank × u64
//!   payload   prod(shape) × dtype-width bytes, row-major
//! ```
//!
//! Records appear in lexicographic name order. Parameter checkpoints use
//! f32 records; training-state snapshots (optimizer moments, master
//! weights) use f64 records. See FORMATS.md.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::ParamSet;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSDCATAR";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Serialize every parameter, in name order, to `path`.
pub fn save_archive(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, p) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an archive back into a [`ParamSet`]. Fails with a format error on a
/// bad header or a record cut short; does not validate shapes against any
/// model (see [`load_checkpoint`]).
pub fn read_archive(path: &Path) -> Result<ParamSet<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 9];
    read_exact_or(&mut r, &mut header, "archive header")?;
    if &header[..8] != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic (not a tensor archive)",
            path.display()
        )));
    }
    if header[8] != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported archive version {}",
            path.display(),
            header[8]
        )));
    }

    let mut params = ParamSet::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break, // clean EOF at a record boundary
            4 => {}
            n => {
                read_exact_or(&mut r, &mut len4[n..], "record name length")?;
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "record name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("record name is not valid UTF-8"))?;

        let mut meta = [0u8; 2];
        read_exact_or(&mut r, &mut meta, &format!("metadata of `{name}`"))?;
        if meta[0] != DTYPE_F32 {
            return Err(Error::format(format!(
                "tensor `{name}`: unknown dtype tag {}",
                meta[0]
            )));
        }
        let rank = meta[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            read_exact_or(&mut r, &mut d8, &format!("shape of `{name}`"))?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_or(&mut r, &mut payload, &format!("payload of `{name}`"))?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&name, values, shape);
    }
    Ok(params)
}

/// Load an archive and validate it against the shape table of `template`
/// (a freshly initialized parameter set for the active config). Mismatches
/// name the offending tensor with expected vs. found shapes.
pub fn load_checkpoint(path: &Path, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let loaded = read_archive(path)?;
    loaded.validate_against(template)?;
    Ok(loaded)
}

/// Serialize named f64 vectors (rank-1 records) in name order. Used for
/// training-state snapshots where double precision must survive a restart.
pub fn save_f64_records(
    path: &Path,
    records: &std::collections::BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, values) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64, 1])?;
        w.write_all(&(values.len() as u64).to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back an archive of f64 records written by [`save_f64_records`].
pub fn read_f64_records(path: &Path) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 9];
    read_exact_or(&mut r, &mut header, "archive header")?;
    if &header[..8] != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic (not a tensor archive)",
            path.display()
        )));
    }
    if header[8] != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported archive version {}",
            path.display(),
            header[8]
        )));
    }
    let mut records = std::collections::BTreeMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break,
            4 => {}
            n => {
                read_exact_or(&mut r, &mut len4[n..], "record name length")?;
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "record name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("record name is not valid UTF-8"))?;
        let mut meta = [0u8; 2];
        read_exact_or(&mut r, &mut meta, &format!("metadata of `{name}`"))?;
        if meta[0] != DTYPE_F64 {
            return Err(Error::format(format!(
                "record `{name}`: expected f64 records, found dtype tag {}",
                meta[0]
            )));
        }
        let rank = meta[1] as usize;
        let mut numel = 1usize;
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            read_exact_or(&mut r, &mut d8, &format!("shape of `{name}`"))?;
            numel *= u64::from_le_bytes(d8) as usize;
        }
        let mut payload = vec![0u8; numel * 8];
        read_exact_or(&mut r, &mut payload, &format!("payload of `{name}`"))?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.insert(name, values);
    }
    Ok(records)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated archive while reading {what}")))
}
