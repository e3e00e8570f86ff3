//! Splits on disk and negative pairing.
//!
//! Layout under the output directory: `manifest.json`, and per split
//! `<split>/annotations.jsonl` plus `<split>/clips/<id>.avcl`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_clip, read_clip, write_clip, ClipSample, GeneratorConfig, SynthError};
use crate::annotation::{classify_frame, parse_annotations, DatasetIndex, FrameAnnotation, FrameClass};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub clips: Vec<String>,
    /// Clips per scene type, keyed by frame class name.
    pub class_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    /// SHA-256 of the config's JSON encoding, hex.
    pub config_hash: String,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitManifest>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| io_err(&path, source))?;
        serde_json::from_str(&text).map_err(|e| SynthError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn config_hash(config: &GeneratorConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

/// Independent stream for one clip, derived from the master seed, the split
/// name and the clip index.
pub fn clip_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn draw_pattern(rng: &mut dyn RngCore, mix: &[f64; 5]) -> FrameClass {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, class) in mix.iter().zip(FrameClass::ALL) {
        acc += p;
        if u < acc && *p > 0.0 {
            return class;
        }
    }
    // Rounding left `u` above the cumulative sum; take the last class in use.
    let last = mix.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    FrameClass::ALL[last]
}

/// Generates every clip of one split. Each clip draws its scene type, then
/// its category, then its content from its own stream.
pub fn generate_split(config: &GeneratorConfig, split: &str) -> Result<Vec<ClipSample>, SynthError> {
    config.validate()?;
    let clips = (0..config.clips_in(split))
        .map(|i| {
            let mut rng = clip_rng(config.seed, split, i);
            let pattern = draw_pattern(&mut rng, &config.class_mix);
            let category = rng.gen_range(0..config.num_classes);
            generate_clip(config, &format!("{split}_{i:04}"), category, pattern, &mut rng)
        })
        .collect();
    Ok(clips)
}

fn clip_path(dir: &Path, split: &str, id: &str) -> PathBuf {
    dir.join(split).join("clips").join(format!("{id}.avcl"))
}

/// Writes all three splits and the manifest under `dir`, creating it if needed.
pub fn generate_dataset(config: &GeneratorConfig, dir: &Path) -> Result<Manifest, SynthError> {
    config.validate()?;
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        let clips = generate_split(config, split)?;
        let clip_dir = dir.join(split).join("clips");
        fs::create_dir_all(&clip_dir).map_err(|e| io_err(&clip_dir, e))?;
        let mut frames = Vec::new();
        let mut counts: BTreeMap<String, usize> = FrameClass::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
        for clip in &clips {
            let path = clip_path(dir, split, &clip.id);
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            let mut out = BufWriter::new(file);
            write_clip(&clip.video, &clip.logmel, clip.labels, &mut out).map_err(|e| io_err(&path, e))?;
            out.flush().map_err(|e| io_err(&path, e))?;
            frames.extend(clip.annotations.iter().cloned());
            *counts.get_mut(clip.pattern.name()).expect("known class") += 1;
        }
        let ann_path = dir.join(split).join("annotations.jsonl");
        let index = DatasetIndex::from_frames(frames);
        fs::write(&ann_path, index.to_jsonl()).map_err(|e| io_err(&ann_path, e))?;
        splits.insert(
            split.to_string(),
            SplitManifest {
                clips: clips.iter().map(|c| c.id.clone()).collect(),
                class_counts: counts,
            },
        );
    }
    let manifest = Manifest {
        config: config.clone(),
        config_hash: config_hash(config),
        seed: config.seed,
        splits,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Loads one split written by [`generate_dataset`], in manifest order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<ClipSample>, SynthError> {
    let manifest = Manifest::read(dir)?;
    let entry = manifest.splits.get(split).ok_or_else(|| SynthError::Format {
        path: dir.join("manifest.json").display().to_string(),
        msg: format!("no split named {split}"),
    })?;
    let ann_path = dir.join(split).join("annotations.jsonl");
    let bytes = fs::read(&ann_path).map_err(|e| io_err(&ann_path, e))?;
    let index = parse_annotations(&bytes)?;
    let mut by_clip: BTreeMap<String, Vec<FrameAnnotation>> = BTreeMap::new();
    for f in index.frames() {
        by_clip.entry(f.video_id.clone()).or_default().push(f.clone());
    }
    let mut clips = Vec::with_capacity(entry.clips.len());
    for id in &entry.clips {
        let path = clip_path(dir, split, id);
        let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
        let (video, logmel, labels) = read_clip(BufReader::new(file)).map_err(|e| SynthError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let annotations = by_clip.remove(id).ok_or_else(|| SynthError::Format {
            path: ann_path.display().to_string(),
            msg: format!("no frames for clip {id}"),
        })?;
        if annotations.len() != video.shape()[0] {
            return Err(SynthError::Format {
                path: ann_path.display().to_string(),
                msg: format!("clip {id} has {} frames but {} annotations", video.shape()[0], annotations.len()),
            });
        }
        let pattern = classify_frame(&annotations[0]);
        clips.push(ClipSample {
            id: id.clone(),
            video,
            logmel,
            labels,
            pattern,
            annotations,
            avc_positive: pattern.is_ave(),
        });
    }
    Ok(clips)
}

/// Pairs the positive's video with the audio of a different clip drawn
/// uniformly from `pool`. Clips are matched by id, so the positive itself may
/// or may not be part of `pool`.
pub fn make_negative_pair(
    positive: &ClipSample,
    pool: &[ClipSample],
    rng: &mut dyn RngCore,
) -> Result<ClipSample, SynthError> {
    let donors: Vec<&ClipSample> = pool.iter().filter(|c| c.id != positive.id).collect();
    if donors.is_empty() {
        return Err(SynthError::PoolTooSmall(pool.len()));
    }
    let donor = donors[rng.gen_range(0..donors.len())];
    Ok(ClipSample {
        logmel: donor.logmel.clone(),
        avc_positive: false,
        ..positive.clone()
    })
}
