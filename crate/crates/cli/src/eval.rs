use std::path::PathBuf;

use avsol_core::annotation::parse_annotations;
use avsol_core::metrics::{evaluate, read_heatmaps, MetricsError};
use serde::{Deserialize, Serialize};

use crate::config::{create_dir, read_bytes, read_file, resolve, write_file, Flags, RunSnapshot};
use crate::{CliError, EvalArgs, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRun {
    annotations: Option<PathBuf>,
    heatmaps: Option<PathBuf>,
    grid_w: usize,
    grid_h: usize,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let defaults = EvalRun {
        annotations: None,
        heatmaps: None,
        grid_w: 6,
        grid_h: 6,
    };
    let file = read_file(args.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("annotations", args.annotations.as_ref())
        .set("heatmaps", args.heatmaps.as_ref())
        .set("grid_w", args.grid_w)
        .set("grid_h", args.grid_h);
    let run: EvalRun = resolve(&defaults, &file, &flags.into_value(), "evaluation")?;
    let annotations = run
        .annotations
        .as_ref()
        .ok_or_else(|| CliError::Usage("--annotations is required".into()))?;
    let heatmaps = run
        .heatmaps
        .as_ref()
        .ok_or_else(|| CliError::Usage("--heatmaps is required".into()))?;

    let index = parse_annotations(&read_bytes(annotations)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", annotations.display())))?;
    let set = read_heatmaps(read_bytes(heatmaps)?.as_slice())
        .map_err(|e| CliError::Data(format!("{}: {e}", heatmaps.display())))?;
    let report = evaluate(&index, &set, run.grid_w, run.grid_h).map_err(|e| match e {
        MetricsError::MissingHeatmaps(missing) => {
            let list: Vec<String> = missing.iter().map(|(v, f)| format!("  {v}#{f}")).collect();
            CliError::Data(format!("{} annotated frames have no heatmap:\n{}", missing.len(), list.join("\n")))
        }
        other => CliError::Data(other.to_string()),
    })?;

    create_dir(&args.out)?;
    RunSnapshot {
        command: "eval",
        seed: None,
        out: args.out.display().to_string(),
        config: &run,
    }
    .write(&args.out)?;
    let mut json = report.to_json();
    json.push('\n');
    write_file(&args.out.join(crate::train::METRICS_FILE), json.as_bytes())?;
    println!("{}", report.to_table());
    Ok(())
}
