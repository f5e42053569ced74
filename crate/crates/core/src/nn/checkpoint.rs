//! Binary checkpoint format.
//!
//! Layout: magic `PACT`, format version `u32`, then per parameter:
//! name length `u32` + UTF-8 name, rank `u32`, dims (`u64` each), and the
//! values as little-endian `f32`. Values are stored at 32-bit regardless
//! of the in-memory element type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::array::{Elem, NdArray};
use super::params::ParamStore;

const MAGIC: &[u8; 4] = b"PACT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),
}

pub fn save<E: Elem>(ps: &ParamStore<E>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, p) in ps.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One raw checkpoint record.
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // partial header read
                let mut rest = vec![0u8; 4 - n];
                r.read_exact(&mut rest).map_err(|_| {
                    CheckpointError::Corrupt("truncated name length".into())
                })?;
                for (i, b) in rest.iter().enumerate() {
                    len_buf[n + i] = *b;
                }
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| CheckpointError::Corrupt(format!("truncated values for {name}")))?;
            values.push(f32::from_le_bytes(b));
        }
        entries.push(Entry {
            name,
            shape,
            values,
        });
    }
    Ok(entries)
}

/// Load a checkpoint into an existing (structurally matching) store.
/// Names and shapes must line up exactly.
pub fn load_into<E: Elem>(ps: &mut ParamStore<E>, path: &Path) -> Result<(), CheckpointError> {
    let entries = read_entries(path)?;
    if entries.len() != ps.len() {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            ps.len()
        )));
    }
    for ((_, p), e) in ps.iter_mut().zip(entries.iter()) {
        if p.name != e.name {
            return Err(CheckpointError::Incompatible(format!(
                "parameter name mismatch: checkpoint '{}', model '{}'",
                e.name, p.name
            )));
        }
        if p.value.shape() != e.shape.as_slice() {
            return Err(CheckpointError::Incompatible(format!(
                "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                e.name,
                e.shape,
                p.value.shape()
            )));
        }
        p.value = NdArray::from_vec(
            e.shape.clone(),
            e.values.iter().map(|v| E::lit(*v as f64)).collect(),
        );
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
