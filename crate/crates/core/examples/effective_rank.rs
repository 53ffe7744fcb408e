//! Effective rank on hand-built spectra and on an untrained encoder under
//! each inference-time masking mode.

use audiomosaic::config::RunConfig;
use audiomosaic::diagnostics::{effective_rank, erank_report, singular_values, spectrum, EmbeddingBatch};
use audiomosaic::experiment::Dataset;
use audiomosaic::model::init_pretrain_model;
use audiomosaic::patch::MaskMode;
use audiomosaic::pipeline::{norm_stats, Frontend};

fn main() -> Result<(), audiomosaic::Error> {
    println!("sigma (2, 1, 1): erank {:.6} (2^1.5 = {:.6})", effective_rank(&spectrum(vec![2.0, 1.0, 1.0])), 2f64.powf(1.5));
    let n = 8;
    let eye: Vec<f64> = (0..n * n).map(|i| (i / n == i % n) as u8 as f64).collect();
    println!("identity 8: erank {:.6}", singular_values(&EmbeddingBatch::new(eye, n, n, "identity")?)?.erank);
    let collapsed: Vec<f64> = (0..64 * 16).map(|i| ((i / 16) as f64 + 1.0) * (1.0 + 1e-3 * (i % 16) as f64)).collect();
    let z = EmbeddingBatch::new(collapsed, 64, 16, "collapsed")?;
    println!("nearly collapsed 64 x 16: erank {:.4}", singular_values(&z)?.erank);

    let mut cfg = RunConfig::default();
    cfg.set("run.clips_per_class", "20")?;
    let data = Dataset::load(&cfg)?;
    let clips = data.heldout(&cfg, 128)?;
    let fe = Frontend::new(&cfg.mel, cfg.encoder.patch, norm_stats(&cfg.mel, data.train_clips().iter())?)?;
    let store = init_pretrain_model::<f32>(&cfg.encoder, &cfg.projection, 0)?;
    let modes = [MaskMode::None, MaskMode::Unstructured, MaskMode::TimeFreq];
    for center in [false, true] {
        let rows = erank_report(&store, &cfg.encoder, &fe, &clips, &cfg.mask_spec(), &modes, 0, false, center)?;
        for r in rows {
            println!("untrained encoder, {:<12} centered={center:<5} erank {:.3} of {}", r.mode.name(), r.erank, r.d);
        }
    }
    Ok(())
}
