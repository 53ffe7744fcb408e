//! Every probe kind on the features of a briefly pre-trained encoder.

use audiomosaic::config::RunConfig;
use audiomosaic::experiment::Dataset;
use audiomosaic::probe::{extract_features, probe, Layers, ProbeConfig, ProbeKind};
use audiomosaic::train::pretrain;

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
    ] {
        cfg.set(k, v)?;
    }
    let data = Dataset::load(&cfg)?;
    let outcome = pretrain(&cfg, &data.train_clips(), None, |_| {})?;
    let fe = audiomosaic::pipeline::Frontend::new(&cfg.mel, cfg.encoder.patch, outcome.norm)?;
    let features = |idx: &[usize]| {
        extract_features(&outcome.store, &cfg.encoder, &fe, &data.clips(idx), &data.labels(idx), Layers::All, false)
    };
    let (train, test) = (features(&data.train)?, features(&data.test)?);
    println!("{} layers of {}-d features, {} train / {} test clips", train.layers.len(), train.dim(), train.len(), test.len());

    let mut kinds = vec![ProbeKind::LinearLast];
    kinds.extend((0..train.layers.len()).map(ProbeKind::LinearLayer));
    kinds.extend([ProbeKind::WeightedSum, ProbeKind::Attentive]);
    for kind in kinds {
        let r = probe(&train, &test, &ProbeConfig::new(kind))?;
        print!("{:<10} test {:.3} train {:.3}", r.kind.to_string(), r.accuracy, r.train_accuracy);
        if let Some(w) = r.layer_weights {
            print!("  weights {:?}", w.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
        println!();
    }
    Ok(())
}
