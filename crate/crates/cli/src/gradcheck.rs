use avsol_core::dnm::{Mode, Model, ModelConfig};
use avsol_core::tensor::gradcheck::{check_all_ops, GradCheckOptions, GradCheckReport};
use avsol_core::tensor::{OpKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{create_dir, read_file, resolve, write_file, Flags, RunSnapshot};
use crate::{CliError, GradcheckArgs, Result};

pub const TOLERANCE: f64 = 1e-4;
pub const REPORT_FILE: &str = "gradcheck.json";

#[derive(Debug, Serialize)]
struct Entry {
    name: String,
    max_relative_error: f64,
    checked: usize,
    pass: bool,
}

impl Entry {
    fn new(name: impl Into<String>, r: &GradCheckReport) -> Self {
        Self {
            name: name.into(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
            pass: r.max_relative_error <= TOLERANCE,
        }
    }
}

#[derive(Debug, Serialize)]
struct Report {
    tolerance: f64,
    seed: u64,
    ops: Vec<Entry>,
    model: Vec<Entry>,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct GradcheckRun<'a> {
    model: &'a ModelConfig,
    draws: usize,
    model_draws: usize,
    samples: usize,
}

/// Worst error of the whole forward pass and loss over `draws` random
/// clips, for each mode, with `samples` elements checked per input tensor.
fn check_model(
    config: &ModelConfig,
    seed: u64,
    draws: usize,
    samples: usize,
    corrupt: Option<OpKind>,
) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for mode in [Mode::Dnm, Mode::Avc, Mode::Cls] {
        let config = ModelConfig { mode, ..config.clone() };
        let mut worst: Option<GradCheckReport> = None;
        for draw in 0..draws {
            let s = seed.wrapping_add(draw as u64);
            let model = Model::<f64>::new(config.clone(), s).map_err(|e| CliError::Data(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
            let mut random = |shape: &[usize], lo: f64, hi: f64| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
            };
            let video = random(&[config.frames, config.image_h, config.image_w, config.channels], 0.0, 1.0);
            let logmel = random(&[config.mel_bins, config.audio_steps], -1.0, 1.0);
            let label: Vec<f64> = (0..config.num_classes).map(|k| (k == draw % config.num_classes) as u8 as f64).collect();
            let options = GradCheckOptions {
                max_elements_per_input: Some(samples),
                seed: s,
                corrupt,
                ..GradCheckOptions::default()
            };
            for avc in [true, false] {
                if mode == Mode::Cls && !avc {
                    continue;
                }
                let r = model
                    .grad_check_loss(&video, &logmel, avc, Some(&label), &options)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
                worst = Some(match worst {
                    Some(w) => w.merge(r),
                    None => r,
                });
            }
        }
        if let Some(w) = worst {
            entries.push(Entry::new(format!("model/{}/{}", fusion_name(&config), mode.name()), &w));
        }
    }
    Ok(entries)
}

fn fusion_name(c: &ModelConfig) -> &'static str {
    match c.fusion {
        avsol_core::dnm::Fusion::Static => "static",
        avsol_core::dnm::Fusion::Cdf => "cdf",
    }
}

pub fn run(args: &GradcheckArgs) -> Result<()> {
    let corrupt = match &args.corrupt_op {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op {name}")))?),
    };
    let file = read_file(args.config.as_deref())?;
    let config: ModelConfig = resolve(&ModelConfig::default(), &file, &Flags::default().into_value(), "model")?;
    config.validate().map_err(|e| CliError::Data(e.to_string()))?;

    let ops = check_all_ops(args.seed, args.draws, corrupt).map_err(|e| CliError::Internal(e.to_string()))?;
    let ops: Vec<Entry> = ops.iter().map(|(k, r)| Entry::new(k.name(), r)).collect();
    let model = check_model(&config, args.seed, args.model_draws, args.samples, corrupt)?;
    let pass = ops.iter().chain(&model).all(|e| e.pass);

    println!("{:<24} {:>14} {:>9}", "check", "max rel error", "elements");
    for e in ops.iter().chain(&model) {
        let verdict = if e.pass { "ok" } else { "FAIL" };
        println!("{:<24} {:>14.3e} {:>9}  {verdict}", e.name, e.max_relative_error, e.checked);
    }
    let report = Report {
        tolerance: TOLERANCE,
        seed: args.seed,
        ops,
        model,
        pass,
    };
    create_dir(&args.out)?;
    RunSnapshot {
        command: "gradcheck",
        seed: Some(args.seed),
        out: args.out.display().to_string(),
        config: &GradcheckRun {
            model: &config,
            draws: args.draws,
            model_draws: args.model_draws,
            samples: args.samples,
        },
    }
    .write(&args.out)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&args.out.join(REPORT_FILE), json.as_bytes())?;

    if pass {
        println!("all checks within {TOLERANCE:e}");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .ops
            .iter()
            .chain(&report.model)
            .filter(|e| !e.pass)
            .map(|e| e.name.as_str())
            .collect();
        Err(CliError::Internal(format!("gradient check failed: {}", failed.join(", "))))
    }
}
