use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avsol_core::annotation::{parse_annotations, rasterize_boxes};
use avsol_core::metrics::{read_heatmaps, write_heatmaps, Heatmap, HeatmapSet};
use serde_json::Value;
use tempfile::TempDir;

fn avsol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsol")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = avsol(args);
    assert!(
        out.status.success(),
        "avsol {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen", "--seed", "1", "--train-clips", "8", "--val-clips", "2", "--test-clips", "10", "--out", s(&data)]);
    data
}

fn train_once(data: &Path, out: &Path, mode: &str) {
    ok(&["train", "--data", s(data), "--mode", mode, "--epochs", "1", "--seed", "5", "--out", s(out)]);
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_manifest_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["splits"]["train"]["clips"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["splits"]["test"]["clips"].as_array().unwrap().len(), 10);
    assert!(data.join("train/annotations.jsonl").is_file());
    assert!(data.join("resolved_config.json").is_file());

    let again = dir.path().join("again");
    ok(&["gen", "--seed", "1", "--train-clips", "8", "--val-clips", "2", "--test-clips", "10", "--out", s(&again)]);
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), fs::read(again.join("manifest.json")).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"seed": 9, "train_clips": 3, "val_clips": 1, "test_clips": 1}"#).unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--config", s(&cfg), "--train-clips", "4", "--out", s(&data)]);
    let resolved = json(&data.join("resolved_config.json"));
    assert_eq!(resolved["config"]["seed"], 9);
    assert_eq!(resolved["config"]["train_clips"], 4);
    assert_eq!(resolved["config"]["val_clips"], 1);
}

#[test]
fn train_writes_every_artifact_and_eval_reproduces_its_report() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train_once(&data, &run, "dnm");
    for f in ["checkpoint.avwt", "train_log.jsonl", "heatmaps.avhm", "metrics.json", "summary.json", "resolved_config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let eval = dir.path().join("eval");
    let annotations = data.join("test/annotations.jsonl");
    ok(&["eval", "--annotations", s(&annotations), "--heatmaps", s(&run.join("heatmaps.avhm")), "--out", s(&eval)]);
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), fs::read(eval.join("metrics.json")).unwrap());

    let again = dir.path().join("again");
    train_once(&data, &again, "dnm");
    for f in ["checkpoint.avwt", "heatmaps.avhm", "metrics.json", "train_log.jsonl"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn cls_mode_emits_attention_weights() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train_once(&data, &run, "cls");
    let set = read_heatmaps(fs::read(run.join("heatmaps.avhm")).unwrap().as_slice()).unwrap();
    assert!(!set.is_empty());
    for (_, _, h) in set.iter() {
        let sum: f64 = h.values().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
    }
}

fn write_set(path: &Path, set: &HeatmapSet) {
    let mut bytes = Vec::new();
    write_heatmaps(set, &mut bytes).unwrap();
    fs::write(path, bytes).unwrap();
}

#[test]
fn eval_scores_perfect_and_uniform_heatmaps() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let annotations = data.join("test/annotations.jsonl");
    let index = parse_annotations(&fs::read(&annotations).unwrap()).unwrap();

    let mut perfect = HeatmapSet::new();
    let mut uniform = HeatmapSet::new();
    for frame in index.frames() {
        let mask = rasterize_boxes(frame, 6, 6);
        perfect.insert(frame.video_id.as_str(), frame.frame_index, Heatmap::indicator(&mask));
        uniform.insert(frame.video_id.as_str(), frame.frame_index, Heatmap::filled(6, 6, 0.5).unwrap());
    }
    let perfect_path = dir.path().join("perfect.avhm");
    let uniform_path = dir.path().join("uniform.avhm");
    write_set(&perfect_path, &perfect);
    write_set(&uniform_path, &uniform);

    let out = dir.path().join("p");
    ok(&["eval", "--annotations", s(&annotations), "--heatmaps", s(&perfect_path), "--out", s(&out)]);
    let report = json(&out.join("metrics.json"));
    assert_eq!(report["hmbox_auc"]["all"], 1.0);
    assert_eq!(report["pibr"]["all"], 1.0);
    assert_eq!(report["pnsr"]["all"], 0.0);

    let out = dir.path().join("u");
    ok(&["eval", "--annotations", s(&annotations), "--heatmaps", s(&uniform_path), "--out", s(&out)]);
    assert_eq!(json(&out.join("metrics.json"))["pnsr"]["all"], 1.0);
}

#[test]
fn eval_lists_frames_without_heatmaps() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let annotations = data.join("test/annotations.jsonl");
    let index = parse_annotations(&fs::read(&annotations).unwrap()).unwrap();
    let mut set = HeatmapSet::new();
    let skipped: Vec<_> = index.frames().iter().filter(|f| f.frame_index == 3).collect();
    for frame in index.frames().iter().filter(|f| f.frame_index != 3) {
        set.insert(frame.video_id.as_str(), frame.frame_index, Heatmap::filled(6, 6, 0.5).unwrap());
    }
    let path = dir.path().join("partial.avhm");
    write_set(&path, &set);
    let out = avsol(&["eval", "--annotations", s(&annotations), "--heatmaps", s(&path), "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for f in skipped {
        assert!(err.contains(&format!("{}#3", f.video_id)), "{err}");
    }
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gc");
    let stdout = ok(&["gradcheck", "--draws", "3", "--model-draws", "1", "--samples", "4", "--out", s(&out)]);
    let report = json(&out.join("gradcheck.json"));
    assert_eq!(report["pass"], true);
    let names: Vec<&str> = report["ops"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for n in &names {
        assert_eq!(stdout.lines().filter(|l| l.split_whitespace().next() == Some(*n)).count(), 1, "{n}");
    }
    assert_eq!(report["model"].as_array().unwrap().len(), 3);

    let bad = avsol(&["gradcheck", "--draws", "2", "--model-draws", "1", "--samples", "4", "--corrupt-op", "matmul", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("matmul"));
}

#[test]
fn render_writes_one_stable_image_per_frame() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train_once(&data, &run, "avc");
    let clip = data.join("test/clips/test_0000.avcl");
    let heat = run.join("heatmaps.avhm");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["render", "--clip", s(&clip), "--heatmaps", s(&heat), "--scale", "4", "--out", s(&a)]);
    ok(&["render", "--clip", s(&clip), "--heatmaps", s(&heat), "--scale", "4", "--out", s(&b)]);
    for f in 0..8 {
        let name = format!("test_0000_f{f:03}.ppm");
        let bytes = fs::read(a.join(&name)).unwrap();
        assert!(bytes.starts_with(b"P6\n96 96\n255\n"));
        assert_eq!(bytes.len(), 13 + 96 * 96 * 3);
        assert_eq!(bytes, fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(avsol(&["--help"]).status.code(), Some(0));
    assert_eq!(avsol(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(avsol(&["train"]).status.code(), Some(1));
    assert_eq!(avsol(&["eval", "--out", s(&dir.path().join("e"))]).status.code(), Some(1));
    let missing = dir.path().join("nope");
    assert_eq!(avsol(&["train", "--data", s(&missing), "--out", s(&dir.path().join("r"))]).status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(avsol(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]).status.code(), Some(2));
}
