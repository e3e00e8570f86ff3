use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use super::{hmbox_auc, in_box_peak, peak_in_box, EvalFrame, Heatmap, HeatmapSet, MetricsError, Result};
use crate::annotation::{DatasetIndex, FrameClass};
use crate::scalar::Real;

/// Looks up the heatmap of a frame.
pub trait HeatmapSource<T> {
    fn heatmap(&self, video_id: &str, frame_index: u32) -> Option<&Heatmap<T>>;
}

impl HeatmapSource<f32> for HeatmapSet {
    fn heatmap(&self, video_id: &str, frame_index: u32) -> Option<&Heatmap<f32>> {
        self.get(video_id, frame_index)
    }
}

impl<T> HeatmapSource<T> for BTreeMap<(String, u32), Heatmap<T>> {
    fn heatmap(&self, video_id: &str, frame_index: u32) -> Option<&Heatmap<T>> {
        self.get(&(video_id.to_string(), frame_index))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AveBuckets {
    pub all: Option<f64>,
    pub single: Option<f64>,
    pub multi: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PnsrBuckets {
    pub all: Option<f64>,
    pub visible: Option<f64>,
    pub audible: Option<f64>,
    pub noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounts {
    pub total: usize,
    pub ave: usize,
    pub single: usize,
    pub multi: usize,
    pub non_ave: usize,
    pub visible: usize,
    pub audible: usize,
    pub noise: usize,
}

/// Metric values per frame bucket. A value is `None` when its bucket has no
/// frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub hmbox_auc: AveBuckets,
    pub pibr: AveBuckets,
    pub pnsr: PnsrBuckets,
    pub counts: FrameCounts,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Scores every frame of `index` against its heatmap on a `grid_w x grid_h`
/// grid. Frames are reduced in index order, so reports are reproducible.
pub fn evaluate<T: Real, S: HeatmapSource<T> + ?Sized>(
    index: &DatasetIndex,
    source: &S,
    grid_w: usize,
    grid_h: usize,
) -> Result<MetricsReport> {
    let missing: Vec<(String, u32)> = index
        .frames()
        .iter()
        .filter(|f| source.heatmap(&f.video_id, f.frame_index).is_none())
        .map(|f| (f.video_id.clone(), f.frame_index))
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingHeatmaps(missing));
    }

    let mut auc = [Mean::default(), Mean::default(), Mean::default()];
    let mut peak = [Mean::default(), Mean::default(), Mean::default()];
    let mut signal = Mean::default();
    let mut noise = [Mean::default(), Mean::default(), Mean::default(), Mean::default()];
    let mut counts = FrameCounts::default();

    for ann in index.frames() {
        let heatmap = source.heatmap(&ann.video_id, ann.frame_index).expect("checked above");
        if (heatmap.width(), heatmap.height()) != (grid_w, grid_h) {
            return Err(MetricsError::DimensionMismatch {
                heatmap: (heatmap.width(), heatmap.height()),
                mask: (grid_w, grid_h),
            });
        }
        let frame = EvalFrame::new(heatmap.clone(), ann.clone());
        counts.total += 1;
        match frame.frame_class {
            FrameClass::AveSingle | FrameClass::AveMulti => {
                let bucket = if frame.frame_class == FrameClass::AveSingle { 1 } else { 2 };
                let a = hmbox_auc(&frame.heatmap, frame.mask())?;
                let p = if peak_in_box(&frame.heatmap, frame.mask())? { 1.0 } else { 0.0 };
                for b in [0, bucket] {
                    auc[b].push(a);
                    peak[b].push(p);
                }
                signal.push(in_box_peak(&frame.heatmap, frame.mask())?.as_f64());
                counts.ave += 1;
                if bucket == 1 {
                    counts.single += 1;
                } else {
                    counts.multi += 1;
                }
            }
            class => {
                let bucket = match class {
                    FrameClass::NonAveVisible => 1,
                    FrameClass::NonAveAudible => 2,
                    _ => 3,
                };
                let m = frame.heatmap.max().as_f64();
                noise[0].push(m);
                noise[bucket].push(m);
                counts.non_ave += 1;
                match bucket {
                    1 => counts.visible += 1,
                    2 => counts.audible += 1,
                    _ => counts.noise += 1,
                }
            }
        }
    }

    let pnsr = match signal.get() {
        Some(s) if s == 0.0 && counts.non_ave > 0 => return Err(MetricsError::ZeroDenominator),
        Some(s) => {
            let ratio = |m: &Mean| m.get().map(|n| n / s);
            PnsrBuckets {
                all: ratio(&noise[0]),
                visible: ratio(&noise[1]),
                audible: ratio(&noise[2]),
                noise: ratio(&noise[3]),
            }
        }
        None => PnsrBuckets::default(),
    };
    let buckets = |m: &[Mean; 3]| AveBuckets {
        all: m[0].get(),
        single: m[1].get(),
        multi: m[2].get(),
    };
    Ok(MetricsReport {
        hmbox_auc: buckets(&auc),
        pibr: buckets(&peak),
        pnsr,
        counts,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with the all/single/multi and visible/audible/noise columns.
    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        }
        let c = &self.counts;
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "", "all", "single", "multi");
        for (name, b) in [("HmBoxAUC", &self.hmbox_auc), ("PiBR", &self.pibr)] {
            let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", name, cell(b.all), cell(b.single), cell(b.multi));
        }
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "frames", c.ave, c.single, c.multi);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>8}", "", "all", "visible", "audible", "noise");
        let p = &self.pnsr;
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            "PNSR",
            cell(p.all),
            cell(p.visible),
            cell(p.audible),
            cell(p.noise)
        );
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>8}", "frames", c.non_ave, c.visible, c.audible, c.noise);
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}
