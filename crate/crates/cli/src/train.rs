use std::path::Path;

use avsol_core::dnm::{evaluate_model, train, DnmError, ModelConfig, TrainConfig};
use avsol_core::metrics::write_heatmaps;
use avsol_core::synth::{load_split, GeneratorConfig, Manifest};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{create_dir, read_file, resolve, write_file, Flags, RunSnapshot};
use crate::{CliError, Result, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.avwt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const HEATMAP_FILE: &str = "heatmaps.avhm";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
}

/// Model defaults with the data-dependent sizes taken from the dataset.
fn model_defaults(data: &GeneratorConfig) -> ModelConfig {
    ModelConfig {
        frames: data.frames,
        image_h: data.image_h,
        image_w: data.image_w,
        channels: 1,
        mel_bins: data.mel_bins,
        audio_steps: data.audio_steps,
        num_classes: data.num_classes,
        ..ModelConfig::default()
    }
}

fn check_against_data(model: &ModelConfig, data: &GeneratorConfig) -> Result<()> {
    let pairs = [
        ("frames", model.frames, data.frames),
        ("image_h", model.image_h, data.image_h),
        ("image_w", model.image_w, data.image_w),
        ("channels", model.channels, 1),
        ("mel_bins", model.mel_bins, data.mel_bins),
        ("audio_steps", model.audio_steps, data.audio_steps),
        ("num_classes", model.num_classes, data.num_classes),
    ];
    for (name, m, d) in pairs {
        if m != d {
            return Err(CliError::Data(format!("model {name} is {m} but the dataset has {d}")));
        }
    }
    Ok(())
}

fn dnm_error(e: DnmError) -> CliError {
    match e {
        DnmError::Tensor(_) => CliError::Internal(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let manifest = Manifest::read(&args.data).map_err(|e| CliError::Data(e.to_string()))?;
    let defaults = TrainRun {
        model: model_defaults(&manifest.config),
        train: TrainConfig::default(),
    };
    let file = read_file(args.config.as_deref())?;
    let mut model_flags = Flags::default();
    model_flags.set("mode", args.mode.as_deref()).set("fusion", args.fusion.as_deref());
    let mut train_flags = Flags::default();
    train_flags
        .set("epochs", args.epochs)
        .set("seed", args.seed)
        .set("lr", args.lr)
        .set("batch_size", args.batch_size)
        .set("augment", args.no_augment.then_some(false));
    let flags = json!({"model": model_flags.into_value(), "train": train_flags.into_value()});
    let run: TrainRun = resolve(&defaults, &file, &flags, "training")?;
    run.model.validate().map_err(dnm_error)?;
    check_against_data(&run.model, &manifest.config)?;

    let train_clips = load_split(&args.data, "train").map_err(|e| CliError::Data(e.to_string()))?;
    let test_clips = load_split(&args.data, "test").map_err(|e| CliError::Data(e.to_string()))?;
    create_dir(&args.out)?;
    RunSnapshot {
        command: "train",
        seed: Some(run.train.seed),
        out: args.out.display().to_string(),
        config: &run,
    }
    .write(&args.out)?;

    let outcome = train(&train_clips, run.model.clone(), &run.train).map_err(dnm_error)?;
    let mut log = String::new();
    for entry in &outcome.log {
        println!(
            "epoch {:>3}  loss {:.4}  avc {:.3}  cls {:.3}",
            entry.epoch, entry.loss, entry.avc_accuracy, entry.cls_accuracy
        );
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    }
    write_file(&args.out.join(LOG_FILE), log.as_bytes())?;

    let mut checkpoint = Vec::new();
    outcome.model.save(&mut checkpoint).map_err(dnm_error)?;
    write_file(&args.out.join(CHECKPOINT_FILE), &checkpoint)?;

    let eval = evaluate_model(&outcome.model, &test_clips, run.train.seed).map_err(dnm_error)?;
    write_outputs(&args.out, &eval)?;
    println!("{}", eval.report.to_table());
    println!(
        "test AVC accuracy {:.3}, classification accuracy {}",
        eval.avc_accuracy,
        eval.cls_accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}"))
    );
    Ok(())
}

fn write_outputs(dir: &Path, eval: &avsol_core::dnm::EvalSummary) -> Result<()> {
    let mut heatmaps = Vec::new();
    write_heatmaps(&eval.heatmaps, &mut heatmaps).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&dir.join(HEATMAP_FILE), &heatmaps)?;
    let mut report = eval.report.to_json();
    report.push('\n');
    write_file(&dir.join(METRICS_FILE), report.as_bytes())?;
    let summary = json!({
        "avc_accuracy": eval.avc_accuracy,
        "cls_accuracy": eval.cls_accuracy,
    });
    let mut summary = serde_json::to_string_pretty(&summary).expect("summary serializes");
    summary.push('\n');
    write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())
}
