//! Frame annotations: bounding boxes of sounding objects, the frame taxonomy,
//! line-delimited JSON parsing, validation and grid rasterization.
//!
//! Audible sound without a visible source is marked by a dummy box that spans
//! the whole frame and carries the `out_of_view` tag. That box only affects
//! [`FrameClass`]; it never contributes foreground cells.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub sounding: bool,
    pub out_of_view: bool,
    pub category: String,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, sounding: bool, category: impl Into<String>) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            sounding,
            out_of_view: false,
            category: category.into(),
        }
    }

    /// The dummy full-frame box marking off-screen sound.
    pub fn out_of_view(width: u32, height: u32, category: impl Into<String>) -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: width as f64,
            y_max: height as f64,
            sounding: true,
            out_of_view: true,
            category: category.into(),
        }
    }

    /// Visible and making sound: the only boxes that become ground truth.
    pub fn is_in_view_sounding(&self) -> bool {
        self.sounding && !self.out_of_view
    }

    /// Half-open containment `x_min <= x < x_max`, `y_min <= y < y_max`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x < self.x_max && self.y_min <= y && y < self.y_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub video_id: String,
    /// Position on the 10 fps timeline of the video.
    pub frame_index: u32,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
}

impl FrameAnnotation {
    pub fn new(video_id: impl Into<String>, frame_index: u32, width: u32, height: u32) -> Self {
        Self {
            video_id: video_id.into(),
            frame_index,
            width,
            height,
            boxes: Vec::new(),
        }
    }

    pub fn with_box(mut self, b: BoundingBox) -> Self {
        self.boxes.push(b);
        self
    }

    pub fn in_view_sounding(&self) -> impl Iterator<Item = &BoundingBox> {
        self.boxes.iter().filter(|b| b.is_in_view_sounding())
    }

    pub fn is_ave(&self) -> bool {
        self.in_view_sounding().next().is_some()
    }

    pub fn key(&self) -> (&str, u32) {
        (&self.video_id, self.frame_index)
    }
}

/// Frame taxonomy: audio-visual events with one or several sounding objects,
/// and non-event frames that are only visible, only audible, or neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameClass {
    AveSingle,
    AveMulti,
    NonAveVisible,
    NonAveAudible,
    NonAveNoise,
}

impl FrameClass {
    pub const ALL: [FrameClass; 5] = [
        FrameClass::AveSingle,
        FrameClass::AveMulti,
        FrameClass::NonAveVisible,
        FrameClass::NonAveAudible,
        FrameClass::NonAveNoise,
    ];

    pub fn is_ave(self) -> bool {
        matches!(self, FrameClass::AveSingle | FrameClass::AveMulti)
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameClass::AveSingle => "ave_single",
            FrameClass::AveMulti => "ave_multi",
            FrameClass::NonAveVisible => "non_ave_visible",
            FrameClass::NonAveAudible => "non_ave_audible",
            FrameClass::NonAveNoise => "non_ave_noise",
        }
    }
}

impl fmt::Display for FrameClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifies a frame from its boxes and tags alone.
///
/// A visible non-sounding object takes precedence over an out-of-view sound
/// when a non-event frame carries both.
pub fn classify_frame(frame: &FrameAnnotation) -> FrameClass {
    match frame.in_view_sounding().count() {
        0 => {}
        1 => return FrameClass::AveSingle,
        _ => return FrameClass::AveMulti,
    }
    if frame.boxes.iter().any(|b| !b.out_of_view) {
        FrameClass::NonAveVisible
    } else if frame.boxes.iter().any(|b| b.out_of_view) {
        FrameClass::NonAveAudible
    } else {
        FrameClass::NonAveNoise
    }
}

/// Binary ground-truth grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), width * height, "mask size");
        Self { width, height, cells }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }
}

/// Maps each grid cell center into frame coordinates and marks it when it
/// falls inside any in-view sounding box.
pub fn rasterize_boxes(frame: &FrameAnnotation, grid_w: usize, grid_h: usize) -> Mask {
    assert!(grid_w >= 1 && grid_h >= 1, "grid dimensions must be positive");
    let boxes: Vec<&BoundingBox> = frame.in_view_sounding().collect();
    let mut cells = vec![false; grid_w * grid_h];
    for cy in 0..grid_h {
        let y = (2 * cy + 1) as f64 * frame.height as f64 / (2 * grid_h) as f64;
        for cx in 0..grid_w {
            let x = (2 * cx + 1) as f64 * frame.width as f64 / (2 * grid_w) as f64;
            cells[cy * grid_w + cx] = boxes.iter().any(|b| b.contains(x, y));
        }
    }
    Mask::new(grid_w, grid_h, cells)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Rule {
    EmptyFrame,
    NonFiniteCoordinate { box_index: usize },
    DegenerateBox { box_index: usize },
    BoxOutsideFrame { box_index: usize },
    OutOfViewNotFullFrame { box_index: usize },
    OutOfViewNotSounding { box_index: usize },
    MultipleOutOfView,
    DuplicateFrame,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::EmptyFrame => write!(f, "frame width and height must be at least 1"),
            Rule::NonFiniteCoordinate { box_index } => write!(f, "box {box_index} has a non-finite coordinate"),
            Rule::DegenerateBox { box_index } => write!(f, "box {box_index} is degenerate (min >= max)"),
            Rule::BoxOutsideFrame { box_index } => write!(f, "box {box_index} extends outside the frame"),
            Rule::OutOfViewNotFullFrame { box_index } => {
                write!(f, "out-of-view box {box_index} does not span the full frame")
            }
            Rule::OutOfViewNotSounding { box_index } => write!(f, "out-of-view box {box_index} is not sounding"),
            Rule::MultipleOutOfView => write!(f, "more than one out-of-view box"),
            Rule::DuplicateFrame => write!(f, "frame appears more than once"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub video_id: String,
    pub frame_index: u32,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} frame {}: {}", self.video_id, self.frame_index, self.rule)
    }
}

fn frame_violations(frame: &FrameAnnotation) -> Vec<Rule> {
    let mut rules = Vec::new();
    if frame.width < 1 || frame.height < 1 {
        rules.push(Rule::EmptyFrame);
    }
    let (w, h) = (frame.width as f64, frame.height as f64);
    for (i, b) in frame.boxes.iter().enumerate() {
        if ![b.x_min, b.y_min, b.x_max, b.y_max].iter().all(|v| v.is_finite()) {
            rules.push(Rule::NonFiniteCoordinate { box_index: i });
            continue;
        }
        if b.x_min >= b.x_max || b.y_min >= b.y_max {
            rules.push(Rule::DegenerateBox { box_index: i });
        } else if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
            rules.push(Rule::BoxOutsideFrame { box_index: i });
        }
        if b.out_of_view {
            if b.x_min != 0.0 || b.y_min != 0.0 || b.x_max != w || b.y_max != h {
                rules.push(Rule::OutOfViewNotFullFrame { box_index: i });
            }
            if !b.sounding {
                rules.push(Rule::OutOfViewNotSounding { box_index: i });
            }
        }
    }
    if frame.boxes.iter().filter(|b| b.out_of_view).count() > 1 {
        rules.push(Rule::MultipleOutOfView);
    }
    rules
}

/// Annotated frames in `(video_id, frame_index)` order.
///
/// Frame numbers `j = 1..=J` follow that order; [`DatasetIndex::ave_positions`]
/// uses 0-based positions into [`DatasetIndex::frames`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    frames: Vec<FrameAnnotation>,
}

impl DatasetIndex {
    /// Sorts the frames; does not validate them (see [`validate`]).
    pub fn from_frames(mut frames: Vec<FrameAnnotation>) -> Self {
        frames.sort_by(|a, b| a.video_id.cmp(&b.video_id).then(a.frame_index.cmp(&b.frame_index)));
        Self { frames }
    }

    pub fn frames(&self) -> &[FrameAnnotation] {
        &self.frames
    }

    /// Total frame count J.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Positions of frames with at least one in-view sounding box.
    pub fn ave_positions(&self) -> BTreeSet<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_ave())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn video_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.frames.iter().map(|f| f.video_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for f in &self.frames {
            counts[classify_frame(f) as usize] += 1;
        }
        counts
    }

    /// One JSON object per line, in index order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("annotations serialize"));
            out.push('\n');
        }
        out
    }
}

/// Every invariant violation in the index, in frame order.
pub fn validate(index: &DatasetIndex) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, frame) in index.frames.iter().enumerate() {
        let violation = |rule| Violation {
            video_id: frame.video_id.clone(),
            frame_index: frame.frame_index,
            rule,
        };
        out.extend(frame_violations(frame).into_iter().map(violation));
        if i > 0 && index.frames[i - 1].key() == frame.key() {
            out.push(violation(Rule::DuplicateFrame));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("invalid annotation: {0}")]
    Invalid(Violation),
    #[error("annotation file is not UTF-8")]
    Encoding,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Warn about unknown fields instead of rejecting the record.
    pub lenient: bool,
}

const FRAME_FIELDS: [&str; 5] = ["video_id", "frame_index", "width", "height", "boxes"];
const BOX_FIELDS: [&str; 7] = ["x_min", "y_min", "x_max", "y_max", "sounding", "out_of_view", "category"];

fn unknown_fields(value: &Value) -> Vec<String> {
    let mut unknown = Vec::new();
    if let Value::Object(map) = value {
        unknown.extend(map.keys().filter(|k| !FRAME_FIELDS.contains(&k.as_str())).cloned());
        if let Some(Value::Array(boxes)) = map.get("boxes") {
            for (i, b) in boxes.iter().enumerate() {
                if let Value::Object(bm) = b {
                    unknown.extend(
                        bm.keys()
                            .filter(|k| !BOX_FIELDS.contains(&k.as_str()))
                            .map(|k| format!("boxes[{i}].{k}")),
                    );
                }
            }
        }
    }
    unknown
}

/// Strict parse of a line-delimited annotation file.
pub fn parse_annotations(bytes: &[u8]) -> Result<DatasetIndex, AnnotationError> {
    parse_annotations_with(bytes, ParseOptions::default()).map(|(index, _)| index)
}

/// Parses and validates an annotation file. Returns the index plus any
/// warnings produced in lenient mode.
pub fn parse_annotations_with(
    bytes: &[u8],
    options: ParseOptions,
) -> Result<(DatasetIndex, Vec<String>), AnnotationError> {
    let text = std::str::from_utf8(bytes).map_err(|_| AnnotationError::Encoding)?;
    let mut frames = Vec::new();
    let mut warnings = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| AnnotationError::Malformed {
            line,
            message: e.to_string(),
        })?;
        for field in unknown_fields(&value) {
            if !options.lenient {
                return Err(AnnotationError::UnknownField { line, field });
            }
            log::warn!("line {line}: ignoring unknown field `{field}`");
            warnings.push(format!("line {line}: ignoring unknown field `{field}`"));
        }
        let frame: FrameAnnotation = serde_json::from_value(value).map_err(|e| AnnotationError::Malformed {
            line,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    let index = DatasetIndex::from_frames(frames);
    if let Some(v) = validate(&index).into_iter().next() {
        return Err(AnnotationError::Invalid(v));
    }
    Ok((index, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> FrameAnnotation {
        FrameAnnotation::new("v", 0, 100, 100)
    }

    #[test]
    fn empty_file_has_no_frames() {
        let index = parse_annotations(b"").unwrap();
        assert_eq!(index.len(), 0);
        assert!(index.ave_positions().is_empty());
    }

    #[test]
    fn single_sounding_box_is_an_ave_frame() {
        let line = br#"{"video_id":"a","frame_index":3,"width":10,"height":10,"boxes":[{"x_min":1,"y_min":1,"x_max":5,"y_max":5,"sounding":true,"out_of_view":false,"category":"dog"}]}"#;
        let index = parse_annotations(line).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.ave_positions().into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn classification_rules() {
        let two = frame()
            .with_box(BoundingBox::new(0.0, 0.0, 10.0, 10.0, true, "a"))
            .with_box(BoundingBox::new(20.0, 20.0, 30.0, 30.0, true, "b"));
        assert_eq!(classify_frame(&two), FrameClass::AveMulti);
        let silent = frame().with_box(BoundingBox::new(0.0, 0.0, 10.0, 10.0, false, "a"));
        assert_eq!(classify_frame(&silent), FrameClass::NonAveVisible);
        let off = frame().with_box(BoundingBox::out_of_view(100, 100, "a"));
        assert_eq!(classify_frame(&off), FrameClass::NonAveAudible);
        assert_eq!(classify_frame(&frame()), FrameClass::NonAveNoise);
        let mixed = off.clone().with_box(BoundingBox::new(0.0, 0.0, 10.0, 10.0, true, "a"));
        assert_eq!(classify_frame(&mixed), FrameClass::AveSingle);
    }

    #[test]
    fn rasterize_centered_block() {
        let f = frame().with_box(BoundingBox::new(25.0, 25.0, 75.0, 75.0, true, "a"));
        let mask = rasterize_boxes(&f, 10, 10);
        assert_eq!(mask.count(), 25);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(mask.get(x, y), (2..7).contains(&x) && (2..7).contains(&y));
            }
        }
    }

    #[test]
    fn rasterize_ignores_out_of_view_and_silent() {
        let f = frame()
            .with_box(BoundingBox::out_of_view(100, 100, "a"))
            .with_box(BoundingBox::new(0.0, 0.0, 50.0, 50.0, false, "b"));
        assert_eq!(rasterize_boxes(&f, 4, 4).count(), 0);
        let full = frame().with_box(BoundingBox::new(0.0, 0.0, 100.0, 100.0, true, "a"));
        assert_eq!(rasterize_boxes(&full, 7, 3).count(), 21);
    }

    #[test]
    fn degenerate_box_is_one_violation() {
        let f = frame().with_box(BoundingBox::new(5.0, 1.0, 5.0, 9.0, true, "a"));
        let v = validate(&DatasetIndex::from_frames(vec![f]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DegenerateBox { box_index: 0 });
    }

    #[test]
    fn two_out_of_view_boxes_is_one_violation() {
        let f = frame()
            .with_box(BoundingBox::out_of_view(100, 100, "a"))
            .with_box(BoundingBox::out_of_view(100, 100, "b"));
        let v = validate(&DatasetIndex::from_frames(vec![f]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::MultipleOutOfView);
    }

    #[test]
    fn valid_index_has_no_violations() {
        let f = frame().with_box(BoundingBox::new(1.0, 2.0, 3.0, 4.0, true, "a"));
        assert!(validate(&DatasetIndex::from_frames(vec![f])).is_empty());
    }

    #[test]
    fn unknown_fields_strict_and_lenient() {
        let line = br#"{"video_id":"a","frame_index":0,"width":4,"height":4,"boxes":[],"extra":1}"#;
        assert!(matches!(
            parse_annotations(line),
            Err(AnnotationError::UnknownField { line: 1, .. })
        ));
        let (index, warnings) = parse_annotations_with(line, ParseOptions { lenient: true }).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = b"{\"video_id\":\"a\",\"frame_index\":0,\"width\":4,\"height\":4,\"boxes\":[]}\n{not json\n";
        match parse_annotations(text) {
            Err(AnnotationError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_names_frame() {
        let line = br#"{"video_id":"clip7","frame_index":4,"width":10,"height":10,"boxes":[{"x_min":1,"y_min":1,"x_max":50,"y_max":5,"sounding":true,"out_of_view":false,"category":"dog"}]}"#;
        match parse_annotations(line) {
            Err(AnnotationError::Invalid(v)) => {
                assert_eq!(v.video_id, "clip7");
                assert_eq!(v.frame_index, 4);
                assert_eq!(v.rule, Rule::BoxOutsideFrame { box_index: 0 });
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
