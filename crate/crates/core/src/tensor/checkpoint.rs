//! `AVWT` parameter checkpoints.
//!
//! Layout (little-endian): magic `AVWT`, version `u16`, parameter count `u32`,
//! then per parameter: name length `u16` + UTF-8 bytes, rank `u8`, each dim as
//! `u32`, and the values as `f64` in row-major order.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVWT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name().as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("parameter name too long: {}", p.name())))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.value().shape();
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value().data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated file".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

/// Reads every `(name, tensor)` entry of a checkpoint in file order.
pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let magic = read_array::<4>(&mut input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?);
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut input)?) as usize;
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|_| CheckpointError::Malformed("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let rank = read_array::<1>(&mut input)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut input)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::lit(f64::from_le_bytes(read_array(&mut input)?)));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        entries.push((name, tensor));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(entries)
}
