use avsol_core::annotation::{
    classify_frame, parse_annotations, rasterize_boxes, validate, BoundingBox, DatasetIndex, FrameAnnotation,
    FrameClass,
};
use proptest::prelude::*;

const FIXTURE: &str = include_str!("fixtures/ten_frames.jsonl");

#[test]
fn fixture_class_counts() {
    let index = parse_annotations(FIXTURE.as_bytes()).unwrap();
    assert_eq!(index.len(), 10);
    // AveSingle, AveMulti, NonAveVisible, NonAveAudible, NonAveNoise
    assert_eq!(index.class_counts(), [2, 2, 3, 2, 1]);
    let order: Vec<u32> = index.frames().iter().map(|f| f.frame_index).collect();
    assert_eq!(order, (0..10).collect::<Vec<_>>());
    assert_eq!(index.ave_positions().into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn fixture_round_trips() {
    let index = parse_annotations(FIXTURE.as_bytes()).unwrap();
    let again = parse_annotations(index.to_jsonl().as_bytes()).unwrap();
    assert_eq!(index, again);
    assert_eq!(index.to_jsonl(), again.to_jsonl());
}

#[test]
fn frames_sorted_across_videos() {
    let frames = vec![
        FrameAnnotation::new("b", 0, 4, 4),
        FrameAnnotation::new("a", 5, 4, 4),
        FrameAnnotation::new("a", 2, 4, 4),
    ];
    let index = DatasetIndex::from_frames(frames);
    let keys: Vec<(&str, u32)> = index.frames().iter().map(|f| f.key()).collect();
    assert_eq!(keys, vec![("a", 2), ("a", 5), ("b", 0)]);
    assert_eq!(index.video_ids(), vec!["a", "b"]);
}

#[test]
fn duplicate_frames_are_reported() {
    let index = DatasetIndex::from_frames(vec![FrameAnnotation::new("a", 1, 4, 4), FrameAnnotation::new("a", 1, 4, 4)]);
    let v = validate(&index);
    assert_eq!(v.len(), 1);
    assert!(v[0].to_string().contains("a frame 1"));
}

fn arb_box(w: u32, h: u32) -> impl Strategy<Value = BoundingBox> {
    (0..w, 0..h, 1..=w, 1..=h, any::<bool>()).prop_map(move |(x0, y0, dx, dy, sounding)| {
        let x_max = (x0 + dx).min(w);
        let y_max = (y0 + dy).min(h);
        BoundingBox::new(x0 as f64, y0 as f64, x_max as f64, y_max as f64, sounding, "k")
    })
}

fn arb_frame() -> impl Strategy<Value = FrameAnnotation> {
    (1u32..60, 1u32..60).prop_flat_map(|(w, h)| {
        (prop::collection::vec(arb_box(w, h), 0..5), any::<bool>(), 0u32..100).prop_map(move |(boxes, oov, idx)| {
            let mut f = FrameAnnotation::new("p", idx, w, h);
            f.boxes = boxes;
            if oov {
                f.boxes.push(BoundingBox::out_of_view(w, h, "k"));
            }
            f
        })
    })
}

proptest! {
    #[test]
    fn generated_frames_are_valid(frame in arb_frame()) {
        prop_assert!(validate(&DatasetIndex::from_frames(vec![frame])).is_empty());
    }

    #[test]
    fn classification_matches_definitions(frame in arb_frame()) {
        let sounding = frame.boxes.iter().filter(|b| b.sounding && !b.out_of_view).count();
        let in_view = frame.boxes.iter().filter(|b| !b.out_of_view).count();
        let oov = frame.boxes.iter().any(|b| b.out_of_view);
        let candidates = [
            sounding == 1,
            sounding >= 2,
            sounding == 0 && in_view >= 1,
            sounding == 0 && in_view == 0 && oov,
            frame.boxes.is_empty(),
        ];
        prop_assert_eq!(candidates.iter().filter(|&&c| c).count(), 1);
        let expected = FrameClass::ALL[candidates.iter().position(|&c| c).unwrap()];
        prop_assert_eq!(classify_frame(&frame), expected);
    }

    #[test]
    fn adding_a_sounding_box_never_shrinks_the_mask(
        frame in arb_frame(),
        extra in (0u32..30, 0u32..30, 1u32..30, 1u32..30),
        gw in 1usize..12,
        gh in 1usize..12,
    ) {
        let before = rasterize_boxes(&frame, gw, gh);
        let (x0, y0, dx, dy) = extra;
        let x0 = x0.min(frame.width - 1);
        let y0 = y0.min(frame.height - 1);
        let b = BoundingBox::new(
            x0 as f64,
            y0 as f64,
            (x0 + dx).min(frame.width) as f64,
            (y0 + dy).min(frame.height) as f64,
            true,
            "k",
        );
        let after = rasterize_boxes(&frame.clone().with_box(b), gw, gh);
        prop_assert!(after.count() >= before.count());
        for (a, b) in after.cells.iter().zip(&before.cells) {
            prop_assert!(*a || !*b);
        }
    }

    #[test]
    fn parse_serialize_parse_is_identity(frames in prop::collection::vec(arb_frame(), 0..6)) {
        let frames: Vec<FrameAnnotation> = frames
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.frame_index = i as u32;
                f
            })
            .collect();
        let index = DatasetIndex::from_frames(frames);
        let text = index.to_jsonl();
        let parsed = parse_annotations(text.as_bytes()).unwrap();
        prop_assert_eq!(&parsed, &index);
        prop_assert_eq!(parse_annotations(parsed.to_jsonl().as_bytes()).unwrap(), parsed);
    }
}
