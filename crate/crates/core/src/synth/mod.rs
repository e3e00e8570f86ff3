//! Synthetic audio-visual scenes covering every frame class.
//!
//! Each category has its own blob shape, motion style and spectral template.
//! A per-clip envelope drives both the blob's brightness and motion and the
//! loudness of its template, so a sounding blob is the image region whose
//! temporal profile follows the audio.

mod clipfile;
mod dataset;

pub use clipfile::{read_clip, write_clip, CLIP_MAGIC};
pub use dataset::{
    clip_rng, generate_dataset, generate_split, load_split, make_negative_pair, Manifest, SplitManifest, SPLITS,
};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{BoundingBox, FrameAnnotation, FrameClass};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("negative pairs need at least two clips in the pool, found {0}")]
    PoolTooSmall(usize),
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("clip file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("annotations: {0}")]
    Annotation(#[from] crate::annotation::AnnotationError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub frames: usize,
    pub mel_bins: usize,
    pub audio_steps: usize,
    pub num_classes: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    /// Probabilities of AveSingle, AveMulti, NonAveVisible, NonAveAudible and
    /// NonAveNoise scenes.
    pub class_mix: [f64; 5],
    /// Fraction of two-object scenes whose objects have different categories.
    pub multi_object_fraction: f64,
    /// Chance that an event scene also shows a silent object.
    pub distractor_prob: f64,
    /// Amplitude of the static background texture and of the audio noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_h: 24,
            image_w: 24,
            frames: 8,
            mel_bins: 16,
            audio_steps: 8,
            num_classes: 4,
            train_clips: 200,
            val_clips: 50,
            test_clips: 50,
            class_mix: [0.5, 0.2, 0.1, 0.1, 0.1],
            multi_object_fraction: 0.5,
            distractor_prob: 0.3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.image_h < 18 || self.image_w < 18 {
            return bad("frames must be at least 18x18 pixels".into());
        }
        for (name, v) in [
            ("frames", self.frames),
            ("mel_bins", self.mel_bins),
            ("audio_steps", self.audio_steps),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.num_classes > 32 {
            return bad("at most 32 categories fit the label bitmap".into());
        }
        if self.class_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("class_mix entries must lie in [0, 1]".into());
        }
        if (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("class_mix sums to {}, not 1", self.class_mix.iter().sum::<f64>()));
        }
        for (name, p) in [
            ("multi_object_fraction", self.multi_object_fraction),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number".into());
        }
        Ok(())
    }

    pub fn clips_in(&self, split: &str) -> usize {
        match split {
            "train" => self.train_clips,
            "val" => self.val_clips,
            "test" => self.test_clips,
            _ => 0,
        }
    }
}

/// One synthetic one-second segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: String,
    /// `[frames, H, W, 1]`, values in `[0, 1]`.
    pub video: Tensor<f32>,
    /// `[mel_bins, audio_steps]`
    pub logmel: Tensor<f32>,
    /// Bit `k` set when category `k` is a sounding event in the clip.
    pub labels: u32,
    pub pattern: FrameClass,
    pub annotations: Vec<FrameAnnotation>,
    /// Whether the audio belongs to a visible sounding object in the video.
    pub avc_positive: bool,
}

impl ClipSample {
    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        (0..num_classes).map(|k| (self.labels >> k & 1) as f64).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        (0..32).filter(|k| self.labels >> k & 1 == 1).collect()
    }
}

pub fn category_name(k: usize) -> String {
    format!("class{k}")
}

/// Per-frame loudness in `[0, 1]`: each frame is either quiet or loud, with at
/// least two of each when there are four or more frames.
fn envelope(rng: &mut dyn RngCore, frames: usize) -> Vec<f64> {
    loop {
        let e: Vec<f64> = (0..frames)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0.8..1.0)
                } else {
                    rng.gen_range(0.0..0.2)
                }
            })
            .collect();
        let loud = e.iter().filter(|&&v| v > 0.5).count();
        if frames < 4 || (loud >= 2 && frames - loud >= 2) {
            return e;
        }
    }
}

pub(crate) fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// An envelope whose correlation with every one of `others` stays below 0.5.
fn independent_envelope(rng: &mut dyn RngCore, frames: usize, others: &[&[f64]]) -> Vec<f64> {
    loop {
        let e = envelope(rng, frames);
        if others.iter().all(|o| correlation(&e, o).abs() < 0.5) {
            return e;
        }
    }
}

/// Whether pixel offset `(dx, dy)` from the blob center is part of the shape
/// of category `k` at `scale`. Categories past the fourth reuse the shapes at
/// smaller sizes.
fn in_shape(k: usize, dx: f64, dy: f64, scale: f64) -> bool {
    let size = scale / (1.0 + 0.15 * (k / 4) as f64);
    let (x, y) = (dx / size, dy / size);
    match k % 4 {
        0 => x * x + y * y <= 3.5 * 3.5,
        1 => x.abs() <= 3.0 && y.abs() <= 3.0,
        2 => {
            let r2 = x * x + y * y;
            (1.6 * 1.6..=3.5 * 3.5).contains(&r2)
        }
        _ => (x.abs() <= 1.0 && y.abs() <= 3.5) || (y.abs() <= 1.0 && x.abs() <= 3.5),
    }
}

/// Distance from its center a blob may reach, motion included.
const BLOB_REACH: f64 = 4.5;

/// A blob in one frame: center offset and size scale set by the motion style,
/// intensity by the envelope.
fn blob_frame(k: usize, e: f64, frame: usize) -> (f64, f64, f64, f64) {
    let intensity = 0.4 + 0.6 * e;
    let sign = if frame % 2 == 0 { 1.0 } else { -1.0 };
    match k % 4 {
        0 => (0.0, 0.0, 1.0, intensity),
        1 => (0.0, 0.0, 0.75 + 0.25 * e, intensity),
        2 => (sign * e.round(), 0.0, 1.0, intensity),
        _ => (0.0, sign * e.round(), 1.0, intensity),
    }
}

struct Blob {
    category: usize,
    cx: f64,
    cy: f64,
    envelope: Vec<f64>,
    sounding: bool,
}

/// Blob centers. A single blob may sit anywhere it fits; several blobs go to
/// distinct quadrants, far enough apart that they never touch.
fn place_blobs(rng: &mut dyn RngCore, w: usize, h: usize, n: usize) -> Vec<(f64, f64)> {
    let (lo, hx, hy) = (BLOB_REACH, w as f64 - BLOB_REACH, h as f64 - BLOB_REACH);
    if n == 1 {
        return vec![(rng.gen_range(lo..=hx).round(), rng.gen_range(lo..=hy).round())];
    }
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let jx = ((hx - lo - 2.0 * BLOB_REACH) / 2.0).clamp(0.0, 3.0);
    let jy = ((hy - lo - 2.0 * BLOB_REACH) / 2.0).clamp(0.0, 3.0);
    quadrants[..n.min(4)]
        .iter()
        .map(|&q| {
            let x = if q % 2 == 0 { lo + rng.gen_range(0.0..=jx) } else { hx - rng.gen_range(0.0..=jx) };
            let y = if q / 2 == 0 { lo + rng.gen_range(0.0..=jy) } else { hy - rng.gen_range(0.0..=jy) };
            (x.round(), y.round())
        })
        .collect()
}

/// Audio template of category `k`: a Gaussian bump in mel frequency.
fn template(k: usize, classes: usize, mel_bins: usize, bin: usize) -> f64 {
    let spacing = mel_bins as f64 / classes as f64;
    let center = spacing * (k as f64 + 0.5);
    let width = (spacing / 2.5).max(0.6);
    let d = (bin as f64 - center) / width;
    (-0.5 * d * d).exp()
}

fn pick_other(rng: &mut dyn RngCore, classes: usize, avoid: &[usize]) -> usize {
    if avoid.len() >= classes {
        return rng.gen_range(0..classes);
    }
    loop {
        let k = rng.gen_range(0..classes);
        if !avoid.contains(&k) {
            return k;
        }
    }
}

/// Builds one clip of the given scene type. `category` is the category of the
/// main object or sound; other categories are drawn from `rng`.
pub fn generate_clip(
    config: &GeneratorConfig,
    id: &str,
    category: usize,
    pattern: FrameClass,
    rng: &mut dyn RngCore,
) -> ClipSample {
    assert!(category < config.num_classes, "category out of range");
    let (w, h, frames) = (config.image_w, config.image_h, config.frames);
    let classes = config.num_classes;

    let background: Vec<f64> = (0..w * h).map(|_| config.noise * rng.gen::<f64>()).collect();

    let main_env = envelope(rng, frames);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut out_of_view: Option<(usize, Vec<f64>)> = None;
    match pattern {
        FrameClass::AveSingle | FrameClass::AveMulti => {
            let mut cats = vec![category];
            let mut envs = vec![main_env];
            if pattern == FrameClass::AveMulti {
                let other = if rng.gen_bool(config.multi_object_fraction) {
                    pick_other(rng, classes, &[category])
                } else {
                    category
                };
                let env = independent_envelope(rng, frames, &[&envs[0]]);
                cats.push(other);
                envs.push(env);
            }
            let distractor = rng.gen_bool(config.distractor_prob);
            let n = cats.len() + distractor as usize;
            let spots = place_blobs(rng, w, h, n);
            for (i, (k, env)) in cats.into_iter().zip(envs).enumerate() {
                blobs.push(Blob {
                    category: k,
                    cx: spots[i].0,
                    cy: spots[i].1,
                    envelope: env,
                    sounding: true,
                });
            }
            if distractor {
                let used: Vec<usize> = blobs.iter().map(|b| b.category).collect();
                let k = pick_other(rng, classes, &used);
                let others: Vec<&[f64]> = blobs.iter().map(|b| b.envelope.as_slice()).collect();
                let env = independent_envelope(rng, frames, &others);
                let (cx, cy) = spots[n - 1];
                blobs.push(Blob {
                    category: k,
                    cx,
                    cy,
                    envelope: env,
                    sounding: false,
                });
            }
        }
        FrameClass::NonAveVisible => {
            let (cx, cy) = place_blobs(rng, w, h, 1)[0];
            blobs.push(Blob {
                category,
                cx,
                cy,
                envelope: main_env,
                sounding: false,
            });
        }
        FrameClass::NonAveAudible => out_of_view = Some((category, main_env)),
        FrameClass::NonAveNoise => {}
    }

    let mut video = vec![0f32; frames * h * w];
    let mut annotations = Vec::with_capacity(frames);
    for f in 0..frames {
        let plane = &mut video[f * h * w..(f + 1) * h * w];
        for (p, &b) in plane.iter_mut().zip(&background) {
            *p = b as f32;
        }
        let mut ann = FrameAnnotation::new(id, f as u32, w as u32, h as u32);
        for blob in &blobs {
            let (ox, oy, scale, intensity) = blob_frame(blob.category, blob.envelope[f], f);
            let (cx, cy) = (blob.cx + ox, blob.cy + oy);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    // Pixel centers sit at half-integer coordinates.
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if in_shape(blob.category, dx, dy, scale) {
                        let p = &mut plane[y * w + x];
                        *p = p.max(intensity as f32);
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
            }
            let b = BoundingBox::new(
                x0.saturating_sub(1) as f64,
                y0.saturating_sub(1) as f64,
                (x1 + 2).min(w) as f64,
                (y1 + 2).min(h) as f64,
                blob.sounding,
                category_name(blob.category),
            );
            ann.boxes.push(b);
        }
        if let Some((k, _)) = &out_of_view {
            ann.boxes.push(BoundingBox::out_of_view(w as u32, h as u32, category_name(*k)));
        }
        annotations.push(ann);
    }

    let mut sources: Vec<(usize, &[f64])> = blobs
        .iter()
        .filter(|b| b.sounding)
        .map(|b| (b.category, b.envelope.as_slice()))
        .collect();
    if let Some((k, env)) = &out_of_view {
        sources.push((*k, env));
    }
    let (bins, steps) = (config.mel_bins, config.audio_steps);
    let mut logmel = vec![0f32; bins * steps];
    for b in 0..bins {
        for s in 0..steps {
            let f = s * frames / steps;
            let signal: f64 = sources.iter().map(|(k, env)| template(*k, classes, bins, b) * env[f]).sum();
            logmel[b * steps + s] = (signal + config.noise * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }

    let labels = if pattern.is_ave() {
        blobs.iter().filter(|b| b.sounding).fold(0u32, |acc, b| acc | 1 << b.category)
    } else {
        0
    };
    ClipSample {
        id: id.to_string(),
        video: Tensor::new(vec![frames, h, w, 1], video).expect("video size"),
        logmel: Tensor::new(vec![bins, steps], logmel).expect("audio size"),
        labels,
        pattern,
        annotations,
        avc_positive: pattern.is_ave(),
    }
}

/// Training-time video augmentation: a horizontal flip with probability 1/2,
/// then a square crop covering 80-100% of the shorter side resized back to
/// full size with bilinear sampling.
pub fn augment_video(video: &Tensor<f32>, rng: &mut dyn RngCore) -> Tensor<f32> {
    let s = video.shape();
    let (frames, h, w, c) = (s[0], s[1], s[2], s[3]);
    let flip = rng.gen_bool(0.5);
    let side = (h.min(w) as f64 * rng.gen_range(0.8..=1.0)).round().max(1.0);
    let x0 = rng.gen_range(0.0..=(w as f64 - side));
    let y0 = rng.gen_range(0.0..=(h as f64 - side));
    let src = video.data();
    let at = |f: usize, y: usize, x: usize, k: usize| src[((f * h + y) * w + x) * c + k];
    let mut out = vec![0f32; src.len()];
    for f in 0..frames {
        for y in 0..h {
            let sy = (y0 + (y as f64 + 0.5) * side / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (yl, ty) = (sy.floor() as usize, sy - sy.floor());
            let yh = (yl + 1).min(h - 1);
            for x in 0..w {
                let sx = (x0 + (x as f64 + 0.5) * side / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (xl, tx) = (sx.floor() as usize, sx - sx.floor());
                let xh = (xl + 1).min(w - 1);
                let dst_x = if flip { w - 1 - x } else { x };
                for k in 0..c {
                    let top = at(f, yl, xl, k) as f64 * (1.0 - tx) + at(f, yl, xh, k) as f64 * tx;
                    let bottom = at(f, yh, xl, k) as f64 * (1.0 - tx) + at(f, yh, xh, k) as f64 * tx;
                    out[((f * h + y) * w + dst_x) * c + k] = (top * (1.0 - ty) + bottom * ty) as f32;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}
