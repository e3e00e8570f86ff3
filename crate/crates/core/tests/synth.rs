use std::fs;
use std::path::Path;

use avsol_core::annotation::{classify_frame, parse_annotations, FrameClass};
use avsol_core::synth::{
    augment_video, clip_rng, generate_clip, generate_dataset, generate_split, load_split, make_negative_pair, read_clip,
    write_clip, ClipSample, GeneratorConfig, Manifest, SynthError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clip(pattern: FrameClass, category: usize, seed: u64) -> ClipSample {
    clip_with(&GeneratorConfig::default(), pattern, category, seed)
}

fn clip_with(config: &GeneratorConfig, pattern: FrameClass, category: usize, seed: u64) -> ClipSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_clip(config, &format!("c{seed}"), category, pattern, &mut rng)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn noise_clips_have_no_boxes() {
    for seed in 0..10 {
        let c = clip(FrameClass::NonAveNoise, 0, seed);
        assert!(c.annotations.iter().all(|a| a.boxes.is_empty()));
        assert!(!c.avc_positive);
        assert_eq!(c.labels, 0);
    }
}

#[test]
fn single_event_box_bounds_blob_with_one_pixel_margin() {
    let config = GeneratorConfig {
        distractor_prob: 0.0,
        ..GeneratorConfig::default()
    };
    for seed in 0..20 {
        let k = seed as usize % 4;
        let c = clip_with(&config, FrameClass::AveSingle, k, seed);
        assert_eq!(c.labels, 1 << k);
        let (h, w) = (config.image_h, config.image_w);
        for (f, ann) in c.annotations.iter().enumerate() {
            assert_eq!(ann.boxes.len(), 1);
            let b = &ann.boxes[0];
            assert!(b.sounding && !b.out_of_view);
            // Background stays below the noise amplitude; blobs start at 0.4.
            let lit: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| c.video.data()[(f * h + y) * w + x] > 0.3)
                .collect();
            let x0 = lit.iter().map(|p| p.0).min().unwrap();
            let x1 = lit.iter().map(|p| p.0).max().unwrap();
            let y0 = lit.iter().map(|p| p.1).min().unwrap();
            let y1 = lit.iter().map(|p| p.1).max().unwrap();
            assert_eq!(b.x_min, x0.saturating_sub(1) as f64);
            assert_eq!(b.y_min, y0.saturating_sub(1) as f64);
            assert_eq!(b.x_max, (x1 + 2).min(w) as f64);
            assert_eq!(b.y_max, (y1 + 2).min(h) as f64);
        }
    }
}

#[test]
fn every_frame_classifies_as_its_scenario() {
    for pattern in FrameClass::ALL {
        for seed in 0..25 {
            let c = clip(pattern, seed as usize % 4, seed);
            assert_eq!(c.pattern, pattern);
            assert_eq!(c.avc_positive, pattern.is_ave());
            for ann in &c.annotations {
                assert_eq!(classify_frame(ann), pattern, "clip {} frame {}", c.id, ann.frame_index);
            }
        }
    }
}

#[test]
fn silent_objects_carry_non_sounding_boxes() {
    let config = GeneratorConfig {
        distractor_prob: 1.0,
        ..GeneratorConfig::default()
    };
    for seed in 0..10 {
        let c = clip_with(&config, FrameClass::AveSingle, 1, seed);
        for ann in &c.annotations {
            assert_eq!(ann.boxes.iter().filter(|b| b.sounding).count(), 1);
            assert_eq!(ann.boxes.iter().filter(|b| !b.sounding).count(), 1);
        }
        let v = clip(FrameClass::NonAveVisible, 2, seed);
        assert!(v.annotations.iter().all(|a| a.boxes.len() == 1 && !a.boxes[0].sounding));
        let a = clip(FrameClass::NonAveAudible, 2, seed);
        assert!(a.annotations.iter().all(|a| a.boxes.len() == 1 && a.boxes[0].out_of_view));
    }
}

#[test]
fn multi_object_scenes_sum_two_sources() {
    let same = GeneratorConfig {
        multi_object_fraction: 0.0,
        ..GeneratorConfig::default()
    };
    let different = GeneratorConfig {
        multi_object_fraction: 1.0,
        ..GeneratorConfig::default()
    };
    for seed in 0..10 {
        let c = clip_with(&same, FrameClass::AveMulti, 3, seed);
        assert_eq!(c.labels, 1 << 3);
        assert!(c.annotations.iter().all(|a| a.boxes.iter().filter(|b| b.sounding).count() == 2));
        let c = clip_with(&different, FrameClass::AveMulti, 3, seed);
        assert_eq!(c.labels.count_ones(), 2);
        assert!(c.labels & 1 << 3 != 0);
    }
}

fn region_profile(c: &ClipSample, config: &GeneratorConfig, x: (usize, usize), y: (usize, usize)) -> Vec<f64> {
    let (h, w) = (config.image_h, config.image_w);
    (0..config.frames)
        .map(|f| {
            let mut s = 0.0;
            for yy in y.0..y.1 {
                for xx in x.0..x.1 {
                    s += c.video.data()[(f * h + yy) * w + xx] as f64;
                }
            }
            s
        })
        .collect()
}

/// The sounding box follows the audio energy with correlation above 0.9; no
/// 4x4 window clear of it does.
#[test]
fn sounding_blob_is_the_region_that_follows_the_audio() {
    let config = GeneratorConfig::default();
    let (h, w, frames) = (config.image_h, config.image_w, config.frames);
    assert_eq!(config.audio_steps, frames);
    for seed in 0..60 {
        let c = clip(FrameClass::AveSingle, seed as usize % 4, seed);
        let bins = config.mel_bins;
        let energy: Vec<f64> = (0..frames)
            .map(|s| (0..bins).map(|b| c.logmel.data()[b * frames + s] as f64).sum())
            .collect();
        let boxes: Vec<_> = c
            .annotations
            .iter()
            .map(|a| a.boxes.iter().find(|b| b.sounding).unwrap().clone())
            .collect();
        let x0 = boxes.iter().map(|b| b.x_min as usize).min().unwrap();
        let y0 = boxes.iter().map(|b| b.y_min as usize).min().unwrap();
        let x1 = boxes.iter().map(|b| b.x_max as usize).max().unwrap();
        let y1 = boxes.iter().map(|b| b.y_max as usize).max().unwrap();
        let r = pearson(&region_profile(&c, &config, (x0, x1), (y0, y1)), &energy);
        assert!(r > 0.9, "clip {seed}: sounding box correlates only {r:.3}");
        for cy in 0..=h - 4 {
            for cx in 0..=w - 4 {
                let clear = cx + 4 <= x0 || x1 <= cx || cy + 4 <= y0 || y1 <= cy;
                if clear {
                    let r = pearson(&region_profile(&c, &config, (cx, cx + 4), (cy, cy + 4)), &energy);
                    assert!(!(r > 0.9), "clip {seed}: window ({cx},{cy}) correlates {r:.3}");
                }
            }
        }
    }
}

#[test]
fn same_stream_gives_identical_clips() {
    let config = GeneratorConfig::default();
    for pattern in FrameClass::ALL {
        let a = clip(pattern, 1, 7);
        let b = clip(pattern, 1, 7);
        assert_eq!(a, b);
    }
    let s1 = generate_split(&config, "val").unwrap();
    let s2 = generate_split(&config, "val").unwrap();
    assert_eq!(s1, s2);
    // The streams of different splits and indices differ.
    use rand::RngCore;
    let x = clip_rng(0, "train", 0).next_u64();
    assert_ne!(x, clip_rng(0, "val", 0).next_u64());
    assert_ne!(x, clip_rng(0, "train", 1).next_u64());
    assert_ne!(x, clip_rng(1, "train", 0).next_u64());
}

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        train_clips: 100,
        val_clips: 10,
        test_clips: 12,
        class_mix: [0.5, 0.1, 0.2, 0.1, 0.1],
        seed: 11,
        ..GeneratorConfig::default()
    }
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_counts_match_the_seeded_draws() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let train = &manifest.splits["train"];
    assert_eq!(train.clips.len(), 100);
    assert_eq!(train.class_counts.values().sum::<usize>(), 100);

    let clips = generate_split(&config, "train").unwrap();
    for class in FrameClass::ALL {
        let n = clips.iter().filter(|c| c.pattern == class).count();
        assert_eq!(train.class_counts[class.name()], n, "{class}");
    }
    // Loose multinomial sanity: each count within 4 standard deviations.
    for (class, p) in FrameClass::ALL.iter().zip(config.class_mix) {
        let n = train.class_counts[class.name()] as f64;
        let sd = (100.0 * p * (1.0 - p)).sqrt();
        assert!((n - 100.0 * p).abs() <= 4.0 * sd, "{class}: {n}");
    }

    let bytes = fs::read(dir.path().join("train/annotations.jsonl")).unwrap();
    let index = parse_annotations(&bytes).unwrap();
    assert_eq!(index.len(), 100 * config.frames);

    assert_eq!(Manifest::read(dir.path()).unwrap(), manifest);
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.config_hash.len(), 64);
}

#[test]
fn regenerating_gives_identical_files() {
    let config = GeneratorConfig {
        train_clips: 20,
        val_clips: 5,
        test_clips: 5,
        ..small_config()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&config, a.path()).unwrap();
    generate_dataset(&config, b.path()).unwrap();
    let (fa, fb) = (all_files(a.path()), all_files(b.path()));
    assert_eq!(fa.len(), 3 + 1 + 30);
    assert_eq!(fa, fb);

    let other = GeneratorConfig { seed: 12, ..config };
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&other, c.path()).unwrap();
    assert_ne!(all_files(c.path()), fa);
}

#[test]
fn load_split_reads_back_what_was_generated() {
    let config = GeneratorConfig {
        train_clips: 15,
        val_clips: 3,
        test_clips: 4,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&config, dir.path()).unwrap();
    for split in ["train", "val", "test"] {
        assert_eq!(load_split(dir.path(), split).unwrap(), generate_split(&config, split).unwrap());
    }
    assert!(load_split(dir.path(), "holdout").is_err());
}

#[test]
fn negatives_swap_audio_only() {
    let pool: Vec<ClipSample> = (0..2).map(|s| clip(FrameClass::AveSingle, s as usize, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let neg = make_negative_pair(&pool[0], &pool, &mut rng).unwrap();
        assert_eq!(neg.logmel, pool[1].logmel);
        assert_eq!(neg.video, pool[0].video);
        assert_eq!(neg.annotations, pool[0].annotations);
        assert!(!neg.avc_positive);
    }
    assert!(matches!(
        make_negative_pair(&pool[0], &pool[..1], &mut rng),
        Err(SynthError::PoolTooSmall(1))
    ));
}

#[test]
fn donors_are_drawn_uniformly() {
    let pool: Vec<ClipSample> = (0..10).map(|s| clip(FrameClass::NonAveNoise, 0, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 10];
    for _ in 0..1000 {
        let neg = make_negative_pair(&pool[4], &pool, &mut rng).unwrap();
        let donor = pool.iter().position(|c| c.logmel == neg.logmel).unwrap();
        counts[donor] += 1;
    }
    assert_eq!(counts[4], 0);
    for (i, &n) in counts.iter().enumerate().filter(|(i, _)| *i != 4) {
        let freq = n as f64 / 1000.0;
        assert!((freq - 1.0 / 9.0).abs() <= 0.05, "donor {i}: {freq}");
    }
}

#[test]
fn clip_files_round_trip_and_reject_damage() {
    let c = clip(FrameClass::AveMulti, 2, 5);
    let mut bytes = Vec::new();
    write_clip(&c.video, &c.logmel, c.labels, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"AVCL");
    let (video, logmel, labels) = read_clip(bytes.as_slice()).unwrap();
    assert_eq!((video, logmel, labels), (c.video.clone(), c.logmel.clone(), c.labels));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(read_clip(trailing.as_slice()).is_err());
    assert!(read_clip(&bytes[..bytes.len() - 1]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(read_clip(magic.as_slice()).is_err());
}

#[test]
fn augmentation_is_seeded_and_keeps_range() {
    let c = clip(FrameClass::AveSingle, 0, 1);
    let a = augment_video(&c.video, &mut ChaCha8Rng::seed_from_u64(4));
    let b = augment_video(&c.video, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    assert_eq!(a.shape(), c.video.shape());
    let (lo, hi) = c.video.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(a.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    let outputs: Vec<_> = (0..8)
        .map(|s| augment_video(&c.video, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    assert!(outputs.iter().any(|o| o != &outputs[0]));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = GeneratorConfig::default();
    let cases = [
        GeneratorConfig {
            class_mix: [0.5, 0.5, 0.5, 0.0, 0.0],
            ..base.clone()
        },
        GeneratorConfig {
            multi_object_fraction: 1.5,
            ..base.clone()
        },
        GeneratorConfig {
            frames: 0,
            ..base.clone()
        },
        GeneratorConfig {
            noise: f64::NAN,
            ..base.clone()
        },
    ];
    for c in cases {
        assert!(matches!(c.validate(), Err(SynthError::Config(_))), "{c:?}");
    }
    assert!(base.validate().is_ok());
}
