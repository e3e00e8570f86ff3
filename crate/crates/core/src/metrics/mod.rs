//! Heatmap evaluation against box ground truth: HmBoxAUC, PiBR and PNSR.
//!
//! Ground truth is rasterized onto the heatmap grid with
//! [`rasterize_boxes`](crate::annotation::rasterize_boxes). All metric values
//! are accumulated in `f64` regardless of the heatmap scalar type.

mod avhm;
mod report;
pub mod reference;

pub use avhm::{read_heatmaps, write_heatmaps, HeatmapSet, HEATMAP_MAGIC};
pub use report::{evaluate, AveBuckets, FrameCounts, HeatmapSource, MetricsReport, PnsrBuckets};

use thiserror::Error;

use crate::annotation::{classify_frame, rasterize_boxes, FrameAnnotation, FrameClass, Mask};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("heatmap is {heatmap:?} but the mask is {mask:?} (width, height)")]
    DimensionMismatch { heatmap: (usize, usize), mask: (usize, usize) },
    #[error("heatmap of {width}x{height} needs {expected} values, got {got}")]
    ValueCount {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("heatmap dimensions must be positive")]
    EmptyHeatmap,
    #[error("heatmap contains a non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("ground-truth mask has no foreground cell")]
    EmptyMask,
    #[error("no frames to evaluate")]
    EmptyInput,
    #[error("{video_id} frame {frame_index} is not an AVE frame")]
    NotAveFrame { video_id: String, frame_index: u32 },
    #[error("PNSR needs at least one AVE frame")]
    NoAveFrames,
    #[error("PNSR needs at least one non-AVE frame")]
    NoNonAveFrames,
    #[error("mean in-box peak over AVE frames is zero")]
    ZeroDenominator,
    #[error("{} frame(s) have no heatmap: {}", .0.len(), format_frames(.0))]
    MissingHeatmaps(Vec<(String, u32)>),
    #[error("heatmap file: {0}")]
    Format(String),
    #[error("heatmap i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn format_frames(frames: &[(String, u32)]) -> String {
    frames
        .iter()
        .map(|(v, f)| format!("{v}#{f}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// A `width x height` grid of finite scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Real> Heatmap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MetricsError::EmptyHeatmap);
        }
        if values.len() != width * height {
            return Err(MetricsError::ValueCount {
                width,
                height,
                expected: width * height,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let values = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, values)
    }

    /// A 0/1 heatmap equal to the mask.
    pub fn indicator(mask: &Mask) -> Self {
        let values = mask.cells.iter().map(|&c| if c { T::one() } else { T::zero() }).collect();
        Self {
            width: mask.width,
            height: mask.height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Every cell that attains the maximum.
    pub fn argmax_cells(&self) -> Vec<usize> {
        let m = self.max();
        (0..self.values.len()).filter(|&i| self.values[i] == m).collect()
    }

    /// Applies `f` to every value. Fails if `f` produces a non-finite value.
    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Result<Heatmap<U>> {
        Heatmap::new(self.width, self.height, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Heatmap<U> {
        Heatmap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check_mask(&self, mask: &Mask) -> Result<usize> {
        if (self.width, self.height) != (mask.width, mask.height) {
            return Err(MetricsError::DimensionMismatch {
                heatmap: (self.width, self.height),
                mask: (mask.width, mask.height),
            });
        }
        match mask.count() {
            0 => Err(MetricsError::EmptyMask),
            n => Ok(n),
        }
    }
}

/// Per-frame min-max rescaling to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_normalize<T: Real>(heatmap: &Heatmap<T>) -> Heatmap<T> {
    let (lo, hi) = (heatmap.min(), heatmap.max());
    let range = hi - lo;
    let values = heatmap
        .values
        .iter()
        .map(|&v| if range > T::zero() { (v - lo) / range } else { T::zero() })
        .collect();
    Heatmap {
        width: heatmap.width,
        height: heatmap.height,
        values,
    }
}

/// Precision and recall of the selection `{h >= tau}`. Precision is `None`
/// when nothing is selected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: f64,
}

pub fn precision_recall_at<T: Real>(heatmap: &Heatmap<T>, mask: &Mask, tau: T) -> Result<PrecisionRecall> {
    let positives = heatmap.check_mask(mask)?;
    let (mut selected, mut hits) = (0usize, 0usize);
    for (v, &g) in heatmap.values.iter().zip(&mask.cells) {
        if *v >= tau {
            selected += 1;
            hits += g as usize;
        }
    }
    Ok(PrecisionRecall {
        precision: (selected > 0).then(|| hits as f64 / selected as f64),
        recall: hits as f64 / positives as f64,
    })
}

/// Area under the precision-recall curve of one frame.
///
/// Thresholds are the distinct heatmap values in decreasing order; each adds
/// `precision * (recall - previous recall)` with the recall before the first
/// threshold taken as 0.
pub fn hmbox_auc<T: Real>(heatmap: &Heatmap<T>, mask: &Mask) -> Result<f64> {
    let positives = heatmap.check_mask(mask)?;
    let mut order: Vec<usize> = (0..heatmap.values.len()).collect();
    order.sort_by(|&a, &b| heatmap.values[b].partial_cmp(&heatmap.values[a]).expect("finite values"));
    let (mut selected, mut hits, mut prev_recall, mut auc) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let tau = heatmap.values[order[i]];
        while i < order.len() && heatmap.values[order[i]] == tau {
            selected += 1;
            hits += mask.cells[order[i]] as usize;
            i += 1;
        }
        let recall = hits as f64 / positives as f64;
        auc += hits as f64 / selected as f64 * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(auc)
}

/// Whether any maximal cell lies in the foreground of `mask`.
pub fn peak_in_box<T: Real>(heatmap: &Heatmap<T>, mask: &Mask) -> Result<bool> {
    heatmap.check_mask(mask)?;
    Ok(heatmap.argmax_cells().into_iter().any(|i| mask.cells[i]))
}

/// Maximum over the foreground cells of `mask`.
pub fn in_box_peak<T: Real>(heatmap: &Heatmap<T>, mask: &Mask) -> Result<T> {
    heatmap.check_mask(mask)?;
    Ok(heatmap
        .values
        .iter()
        .zip(&mask.cells)
        .filter(|(_, &g)| g)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max))
}

/// A heatmap bound to the annotation of the frame it scores.
#[derive(Clone, Debug)]
pub struct EvalFrame<T> {
    pub heatmap: Heatmap<T>,
    pub annotation: FrameAnnotation,
    pub frame_class: FrameClass,
    mask: Mask,
}

impl<T: Real> EvalFrame<T> {
    /// Classifies the annotation and rasterizes it onto the heatmap grid.
    pub fn new(heatmap: Heatmap<T>, annotation: FrameAnnotation) -> Self {
        let mask = rasterize_boxes(&annotation, heatmap.width, heatmap.height);
        let frame_class = classify_frame(&annotation);
        Self {
            heatmap,
            annotation,
            frame_class,
            mask,
        }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    fn require_ave(&self) -> Result<()> {
        if self.frame_class.is_ave() {
            Ok(())
        } else {
            Err(MetricsError::NotAveFrame {
                video_id: self.annotation.video_id.clone(),
                frame_index: self.annotation.frame_index,
            })
        }
    }
}

/// Fraction of AVE frames whose peak falls inside a sounding box.
pub fn pibr<T: Real>(frames: &[EvalFrame<T>]) -> Result<f64> {
    if frames.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut hits = 0usize;
    for f in frames {
        f.require_ave()?;
        hits += peak_in_box(&f.heatmap, &f.mask)? as usize;
    }
    Ok(hits as f64 / frames.len() as f64)
}

/// Mean of the non-AVE frame peaks over the mean in-box peak of AVE frames.
pub fn pnsr<T: Real>(frames: &[EvalFrame<T>]) -> Result<f64> {
    let (ave, non_ave): (Vec<_>, Vec<_>) = frames.iter().partition(|f| f.frame_class.is_ave());
    let signal = mean_in_box_peak(&ave)?;
    let noise = mean_peak(&non_ave)?;
    Ok(noise / signal)
}

fn mean_in_box_peak<T: Real>(ave: &[&EvalFrame<T>]) -> Result<f64> {
    if ave.is_empty() {
        return Err(MetricsError::NoAveFrames);
    }
    let mut sum = 0.0;
    for f in ave {
        sum += in_box_peak(&f.heatmap, &f.mask)?.as_f64();
    }
    match sum / ave.len() as f64 {
        d if d == 0.0 => Err(MetricsError::ZeroDenominator),
        d => Ok(d),
    }
}

fn mean_peak<T: Real>(non_ave: &[&EvalFrame<T>]) -> Result<f64> {
    if non_ave.is_empty() {
        return Err(MetricsError::NoNonAveFrames);
    }
    Ok(non_ave.iter().map(|f| f.heatmap.max().as_f64()).sum::<f64>() / non_ave.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp4() -> Heatmap<f64> {
        Heatmap::new(4, 4, (0..16).map(|k| k as f64 / 16.0).collect()).unwrap()
    }

    fn top_left_2x2() -> Mask {
        let cells = (0..16).map(|i| i % 4 < 2 && i / 4 < 2).collect();
        Mask::new(4, 4, cells)
    }

    #[test]
    fn ramp_precision_recall() {
        // tau = 0.5 selects cells 8..15 (rows 2-3); the top-left block is rows 0-1.
        let pr = precision_recall_at(&ramp4(), &top_left_2x2(), 0.5).unwrap();
        assert_eq!(pr.precision, Some(0.0));
        assert_eq!(pr.recall, 0.0);
        // One foreground cell among the eight selected.
        let cells = (0..16).map(|i| [0, 1, 4, 8].contains(&i)).collect();
        let pr = precision_recall_at(&ramp4(), &Mask::new(4, 4, cells), 0.5).unwrap();
        assert_eq!(pr.precision, Some(1.0 / 8.0));
        assert_eq!(pr.recall, 1.0 / 4.0);
    }

    #[test]
    fn perfect_and_uniform_maps() {
        let mask = Mask::new(10, 10, (0..100).map(|i| (i % 10) < 5 && (i / 10) < 5).collect());
        let exact = Heatmap::<f64>::indicator(&mask);
        let pr = precision_recall_at(&exact, &mask, 0.5).unwrap();
        assert_eq!((pr.precision, pr.recall), (Some(1.0), 1.0));
        assert_eq!(hmbox_auc(&exact, &mask).unwrap(), 1.0);
        let flat = Heatmap::filled(10, 10, 0.5).unwrap();
        let pr = precision_recall_at(&flat, &mask, 0.5).unwrap();
        assert_eq!((pr.precision, pr.recall), (Some(0.25), 1.0));
        assert_eq!(hmbox_auc(&flat, &mask).unwrap(), 0.25);
    }

    #[test]
    fn empty_selection_and_errors() {
        let pr = precision_recall_at(&ramp4(), &top_left_2x2(), 2.0).unwrap();
        assert_eq!((pr.precision, pr.recall), (None, 0.0));
        let empty = Mask::new(4, 4, vec![false; 16]);
        assert!(matches!(hmbox_auc(&ramp4(), &empty), Err(MetricsError::EmptyMask)));
        let small = Mask::new(2, 2, vec![true; 4]);
        assert!(matches!(
            precision_recall_at(&ramp4(), &small, 0.0),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(Heatmap::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn minmax_examples() {
        let h = Heatmap::new(2, 1, vec![0.2, 0.7]).unwrap();
        assert_eq!(minmax_normalize(&h).values(), &[0.0, 1.0]);
        let c = Heatmap::filled(3, 3, 4.2).unwrap();
        assert!(minmax_normalize(&c).values().iter().all(|&v| v == 0.0));
    }
}
