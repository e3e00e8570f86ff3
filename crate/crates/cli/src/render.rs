//! PPM overlays: grayscale frame, heatmap in the red channel after per-frame
//! min-max normalization, sounding boxes in green and silent boxes in
//! magenta. Out-of-view boxes cover the whole frame and are not drawn.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use avsol_core::annotation::{parse_annotations, BoundingBox};
use avsol_core::metrics::{minmax_normalize, read_heatmaps, Heatmap};
use avsol_core::synth::read_clip;
use serde::Serialize;

use crate::config::{create_dir, read_bytes, write_file, RunSnapshot};
use crate::{CliError, RenderArgs, Result};

const SOUNDING: [u8; 3] = [0, 255, 0];
const SILENT: [u8; 3] = [255, 0, 255];

#[derive(Debug, Serialize)]
struct RenderRun<'a> {
    clip: &'a Path,
    heatmaps: &'a Path,
    annotations: &'a Path,
    scale: usize,
}

fn default_annotations(clip: &Path) -> PathBuf {
    clip.parent()
        .and_then(Path::parent)
        .unwrap_or_else(|| Path::new("."))
        .join("annotations.jsonl")
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.w && y < self.h {
            let at = 3 * (y * self.w + x);
            self.rgb[at..at + 3].copy_from_slice(&c);
        }
    }

    fn outline(&mut self, b: &BoundingBox, scale: f64, color: [u8; 3]) {
        let px = |v: f64, limit: usize| ((v * scale).round() as usize).min(limit.saturating_sub(1));
        let (x0, x1) = (px(b.x_min, self.w), px(b.x_max, self.w + 1).saturating_sub(1));
        let (y0, y1) = (px(b.y_min, self.h), px(b.y_max, self.h + 1).saturating_sub(1));
        for x in x0..=x1.max(x0) {
            self.put(x, y0, color);
            self.put(x, y1, color);
        }
        for y in y0..=y1.max(y0) {
            self.put(x0, y, color);
            self.put(x1, y, color);
        }
    }

    fn ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

fn frame_image(
    pixels: &[f32],
    (w, h): (usize, usize),
    heat: &Heatmap<f32>,
    boxes: &[BoundingBox],
    scale: usize,
) -> Canvas {
    let heat = minmax_normalize(heat);
    let (ow, oh) = (w * scale, h * scale);
    let mut canvas = Canvas {
        w: ow,
        h: oh,
        rgb: vec![0; ow * oh * 3],
    };
    for y in 0..oh {
        for x in 0..ow {
            let g = pixels[(y / scale) * w + x / scale].clamp(0.0, 1.0);
            let cx = x * heat.width() / ow;
            let cy = y * heat.height() / oh;
            let v = heat.get(cx, cy).clamp(0.0, 1.0);
            let base = 0.6 * g;
            let r = (base + 0.4 * v) * 255.0;
            let gb = base * 255.0;
            canvas.put(x, y, [r.round() as u8, gb.round() as u8, gb.round() as u8]);
        }
    }
    for b in boxes.iter().filter(|b| !b.out_of_view) {
        canvas.outline(b, scale as f64, if b.sounding { SOUNDING } else { SILENT });
    }
    canvas
}

pub fn run(args: &RenderArgs) -> Result<()> {
    if args.scale == 0 {
        return Err(CliError::Usage("--scale must be at least 1".into()));
    }
    let id = args
        .clip
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("cannot take a clip id from {}", args.clip.display())))?
        .to_string();
    let annotations = args.annotations.clone().unwrap_or_else(|| default_annotations(&args.clip));

    let file = File::open(&args.clip).map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.clip.display())))?;
    let (video, _, _) =
        read_clip(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", args.clip.display())))?;
    let heatmaps = read_heatmaps(read_bytes(&args.heatmaps)?.as_slice())
        .map_err(|e| CliError::Data(format!("{}: {e}", args.heatmaps.display())))?;
    let index = parse_annotations(&read_bytes(&annotations)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", annotations.display())))?;

    let s = video.shape();
    let (frames, h, w, c) = (s[0], s[1], s[2], s[3]);
    if c != 1 {
        return Err(CliError::Data(format!("expected single-channel video, found {c} channels")));
    }
    let clip_frames: Vec<_> = index.frames().iter().filter(|f| f.video_id == id).collect();
    if clip_frames.is_empty() {
        return Err(CliError::Data(format!("{} has no frames for clip {id}", annotations.display())));
    }
    let mut missing = Vec::new();
    for f in 0..frames {
        if heatmaps.get(&id, f as u32).is_none() {
            missing.push(format!("{id}#{f}"));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{} has no heatmap for {}",
            args.heatmaps.display(),
            missing.join(", ")
        )));
    }

    create_dir(&args.out)?;
    RunSnapshot {
        command: "render",
        seed: None,
        out: args.out.display().to_string(),
        config: &RenderRun {
            clip: &args.clip,
            heatmaps: &args.heatmaps,
            annotations: &annotations,
            scale: args.scale,
        },
    }
    .write(&args.out)?;
    for f in 0..frames {
        let pixels = &video.data()[f * h * w..(f + 1) * h * w];
        let heat = heatmaps.get(&id, f as u32).expect("checked above");
        let boxes = clip_frames
            .iter()
            .find(|a| a.frame_index == f as u32)
            .map(|a| a.boxes.as_slice())
            .unwrap_or(&[]);
        let canvas = frame_image(pixels, (w, h), heat, boxes, args.scale);
        write_file(&args.out.join(format!("{id}_f{f:03}.ppm")), &canvas.ppm())?;
    }
    println!("wrote {frames} images to {}", args.out.display());
    Ok(())
}
