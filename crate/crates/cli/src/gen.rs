use avsol_core::synth::{generate_dataset, GeneratorConfig};

use crate::config::{create_dir, read_file, resolve, Flags, RunSnapshot};
use crate::{CliError, GenArgs, Result};

pub fn run(args: &GenArgs) -> Result<()> {
    let file = read_file(args.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("seed", args.seed)
        .set("train_clips", args.train_clips)
        .set("val_clips", args.val_clips)
        .set("test_clips", args.test_clips);
    let config: GeneratorConfig = resolve(&GeneratorConfig::default(), &file, &flags.into_value(), "generator")?;
    config.validate().map_err(|e| CliError::Data(e.to_string()))?;

    create_dir(&args.out)?;
    let manifest = generate_dataset(&config, &args.out).map_err(|e| CliError::Data(e.to_string()))?;
    RunSnapshot {
        command: "gen",
        seed: Some(config.seed),
        out: args.out.display().to_string(),
        config: &config,
    }
    .write(&args.out)?;

    for (split, entry) in &manifest.splits {
        let counts: Vec<String> = entry.class_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{split}: {} clips ({})", entry.clips.len(), counts.join(", "));
    }
    println!("config hash {}", manifest.config_hash);
    println!("wrote {}", args.out.display());
    Ok(())
}
