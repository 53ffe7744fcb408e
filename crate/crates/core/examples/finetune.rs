//! Frozen-encoder probing and full fine-tuning from one pre-training
//! checkpoint.

use audiomosaic::config::RunConfig;
use audiomosaic::experiment::Dataset;
use audiomosaic::train::{pretrain, train_supervised, SupervisedMode, SupervisedSet};

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
        ("run.steps", "40"),
        ("run.probe_epochs", "30"),
        ("run.finetune_epochs", "12"),
        ("run.finetune_batch", "16"),
        ("optim.finetune_lr", "1e-3"),
        ("run.spec_t", "8"),
        ("run.spec_f", "16"),
    ] {
        cfg.set(k, v)?;
    }
    let data = Dataset::load(&cfg)?;
    let ck = pretrain(&cfg, &data.train_clips(), None, |_| {})?.checkpoint;
    let (trc, trl) = (data.train_clips(), data.labels(&data.train));
    let (tec, tel) = (data.test_clips(), data.labels(&data.test));
    let train = SupervisedSet { clips: &trc, labels: &trl };
    let test = SupervisedSet { clips: &tec, labels: &tel };
    for mode in [SupervisedMode::ProbeFrozen, SupervisedMode::Finetune] {
        let out = train_supervised(mode, &cfg, &ck, data.corpus.num_classes(), &train, &test, |m| {
            if m.epoch % 10 == 0 || (mode == SupervisedMode::Finetune && m.epoch % 3 == 0) {
                println!("{mode:?} epoch {:>3} test accuracy {:.3}", m.epoch, m.test_accuracy);
            }
        })?;
        println!("{mode:?}: final test accuracy {:.3}", out.test_accuracy);
    }
    Ok(())
}
