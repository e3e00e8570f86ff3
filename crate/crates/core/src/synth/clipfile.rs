//! `AVCL` clip files, little-endian.
//!
//! Magic `AVCL`, version `u16`, video dims `4 x u16` then `f32` values, audio
//! dims `2 x u16` then `f32` values, label bitmap `u32`.

use std::io::{self, Read, Write};

use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"AVCL";
const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn write_tensor<W: Write>(out: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    for &d in t.shape() {
        let d = u16::try_from(d).map_err(|_| bad(format!("dimension {d} does not fit u16")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(input: &mut R, rank: usize) -> io::Result<Tensor<f32>> {
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 2];
        input.read_exact(&mut b)?;
        shape.push(u16::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_clip<W: Write>(video: &Tensor<f32>, logmel: &Tensor<f32>, labels: u32, mut out: W) -> io::Result<()> {
    if video.rank() != 4 || logmel.rank() != 2 {
        return Err(bad("video must be rank 4 and audio rank 2"));
    }
    out.write_all(CLIP_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_tensor(&mut out, video)?;
    write_tensor(&mut out, logmel)?;
    out.write_all(&labels.to_le_bytes())
}

/// Reads `(video, logmel, labels)`; trailing bytes are an error.
pub fn read_clip<R: Read>(mut input: R) -> io::Result<(Tensor<f32>, Tensor<f32>, u32)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let video = read_tensor(&mut input, 4)?;
    let logmel = read_tensor(&mut input, 2)?;
    let mut l = [0u8; 4];
    input.read_exact(&mut l)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after label bitmap"));
    }
    Ok((video, logmel, u32::from_le_bytes(l)))
}
