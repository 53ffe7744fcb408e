//! A short contrastive pre-training run on a small synthetic corpus, written
//! to a temporary directory and restored from its checkpoint.

use audiomosaic::config::RunConfig;
use audiomosaic::experiment::Dataset;
use audiomosaic::train::{final_window_mean, load_pretrained, pretrain, Checkpoint};

fn main() -> Result<(), audiomosaic::Error> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.depth", "2"),
        ("model.dim", "32"),
        ("model.heads", "2"),
        ("model.proj_hidden", "64"),
        ("model.proj_out", "32"),
        ("run.clips_per_class", "20"),
        ("run.batch", "16"),
        ("run.steps", "60"),
        ("run.checkpoint_every", "20"),
        ("run.deterministic", "true"),
    ] {
        cfg.set(k, v)?;
    }
    let data = Dataset::load(&cfg)?;
    let dir = std::env::temp_dir().join("audiomosaic-pretrain-tiny");
    let outcome = pretrain(&cfg, &data.train_clips(), Some(&dir), |m| {
        if m.step % 10 == 0 {
            println!("step {:>3} loss {:.4} ({} visible tokens per view)", m.step, m.loss, m.visible_tokens);
        }
    })?;
    println!(
        "step-0 loss {:.4}, final-window loss {:.4}",
        outcome.metrics[0].loss,
        final_window_mean(&outcome.metrics).unwrap()
    );

    let ck = Checkpoint::load(dir.join("checkpoint"))?;
    let (store, _) = load_pretrained(&cfg, &ck)?;
    println!(
        "restored {} encoder parameters from step {}, written to {}",
        store.count("encoder."),
        ck.step,
        dir.display()
    );
    Ok(())
}
