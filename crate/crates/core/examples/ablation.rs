//! Masking and augmentation ablations at desk scale.
//!
//! Trains three encoders that differ only in the view pipeline (time/frequency
//! masking, unstructured masking with the same token budget, time/frequency
//! masking without waveform augmentation), then prints the report tables.
//!
//! `cargo run --release --example ablation -- [steps] [out_dir]`
//! (default 100 steps; the full setting is 2000).

use std::path::PathBuf;

use audiomosaic::config::RunConfig;
use audiomosaic::experiment::{desk_run, Dataset};
use audiomosaic::report::{render_report, RunSummary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().unwrap_or_else(|| "100".into());
    let root = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("audiomosaic-ablation"), PathBuf::from);

    let mut summaries = Vec::new();
    for (name, overrides) in [
        ("time_freq", &[][..]),
        ("unstructured", &[("mask.mode", "unstructured")][..]),
        ("no_augment", &[("run.augment", "false")][..]),
    ] {
        let mut cfg = RunConfig::default();
        cfg.set("run.steps", &steps)?;
        cfg.set("run.checkpoint_every", "0")?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        let dir = root.join(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let data = Dataset::load(&cfg)?;
        let run = desk_run(&cfg, &data, Some(&dir), |_| {})?;
        eprintln!(
            "{name}: loss {:.3} -> {:.3}, probe {:.3}",
            run.first_loss, run.final_loss, run.probe.accuracy
        );
        summaries.push(RunSummary::load(&dir)?);
    }
    print!("{}", render_report(&summaries));
    Ok(())
}
