//! `AVHM` heatmap files: every frame of a run in one little-endian file.
//!
//! Magic `AVHM`, version `u16`, frame count `u32`, then per frame: video id
//! length `u16` + UTF-8 bytes, frame index `u32`, width `u16`, height `u16`,
//! and `width * height` `f32` values row-major.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use super::{Heatmap, MetricsError, Result};

pub const HEATMAP_MAGIC: &[u8; 4] = b"AVHM";
const VERSION: u16 = 1;

/// Heatmaps keyed by `(video_id, frame_index)`, iterated in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeatmapSet {
    maps: BTreeMap<(String, u32), Heatmap<f32>>,
}

impl HeatmapSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a heatmap, returning the one it replaced.
    pub fn insert(&mut self, video_id: impl Into<String>, frame_index: u32, heatmap: Heatmap<f32>) -> Option<Heatmap<f32>> {
        self.maps.insert((video_id.into(), frame_index), heatmap)
    }

    pub fn get(&self, video_id: &str, frame_index: u32) -> Option<&Heatmap<f32>> {
        self.maps.get(&(video_id.to_string(), frame_index))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, &Heatmap<f32>)> {
        self.maps.iter().map(|((v, f), h)| (v.as_str(), *f, h))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

pub fn write_heatmaps<W: Write>(set: &HeatmapSet, mut out: W) -> Result<()> {
    out.write_all(HEATMAP_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(set.len()).map_err(|_| MetricsError::Format("too many frames".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (video_id, frame_index, h) in set.iter() {
        let id_len = u16::try_from(video_id.len()).map_err(|_| MetricsError::Format(format!("video id too long: {video_id}")))?;
        let too_big = || MetricsError::Format(format!("{video_id}#{frame_index}: heatmap wider than u16"));
        let w = u16::try_from(h.width()).map_err(|_| too_big())?;
        let hh = u16::try_from(h.height()).map_err(|_| too_big())?;
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(video_id.as_bytes())?;
        out.write_all(&frame_index.to_le_bytes())?;
        out.write_all(&w.to_le_bytes())?;
        out.write_all(&hh.to_le_bytes())?;
        for v in h.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => MetricsError::Format("truncated file".into()),
        _ => MetricsError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_heatmaps<R: Read>(mut input: R) -> Result<HeatmapSet> {
    let magic = take::<4>(&mut input)?;
    if &magic != HEATMAP_MAGIC {
        return Err(MetricsError::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(take(&mut input)?);
    if version != VERSION {
        return Err(MetricsError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut input)?);
    let mut set = HeatmapSet::new();
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(&mut input)?) as usize;
        let mut id = vec![0u8; id_len];
        input
            .read_exact(&mut id)
            .map_err(|_| MetricsError::Format("truncated video id".into()))?;
        let id = String::from_utf8(id).map_err(|_| MetricsError::Format("video id is not UTF-8".into()))?;
        let frame_index = u32::from_le_bytes(take(&mut input)?);
        let w = u16::from_le_bytes(take(&mut input)?) as usize;
        let h = u16::from_le_bytes(take(&mut input)?) as usize;
        let mut values = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            values.push(f32::from_le_bytes(take(&mut input)?));
        }
        let map = Heatmap::new(w, h, values).map_err(|e| MetricsError::Format(format!("{id}#{frame_index}: {e}")))?;
        if set.insert(id.clone(), frame_index, map).is_some() {
            return Err(MetricsError::Format(format!("{id}#{frame_index} appears twice")));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(MetricsError::Format("trailing bytes".into()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut set = HeatmapSet::new();
        set.insert("b", 2, Heatmap::new(2, 1, vec![0.25, -1.5]).unwrap());
        set.insert("a", 7, Heatmap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mut bytes = Vec::new();
        write_heatmaps(&set, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"AVHM");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        // Key order puts "a" first.
        assert_eq!(&bytes[10..13], &[1, 0, b'a']);
        assert_eq!(read_heatmaps(bytes.as_slice()).unwrap(), set);
        bytes.pop();
        assert!(read_heatmaps(bytes.as_slice()).is_err());
    }
}
