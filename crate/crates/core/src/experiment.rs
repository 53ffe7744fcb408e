//! Data plumbing shared by the command line, the examples and the test
//! harness: the corpus a config describes, its train/test split and a pool
//! of held-out clips for diagnostics.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{generate, ingest, split, Corpus, SynthSpec};
use crate::diagnostics::{erank_report, write_erank_csv, ErankRow};
use crate::dsp::Waveform;
use crate::patch::MaskMode;
use crate::pipeline::Frontend;
use crate::probe::{append_results_csv, extract_features, probe, FeatureSet, Layers, ProbeConfig, ProbeKind, ProbeResult};
use crate::rng::{derive_seed, stage};
use crate::train::{final_window_mean, pretrain, PretrainOutcome, StepMetrics};
use crate::Error;

pub struct Dataset {
    pub corpus: Corpus,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// The synthetic corpus (`run.clips_per_class`, `run.corpus_seed`) or the
    /// WAV directory in `run.corpus`, split 80/20 with `run.corpus_seed`.
    pub fn load(cfg: &RunConfig) -> Result<Self, Error> {
        let corpus = if cfg.run.corpus.is_empty() {
            generate(&synth_spec(cfg), cfg.run.corpus_seed)?
        } else {
            let dir = PathBuf::from(&cfg.run.corpus);
            let manifest = if cfg.run.manifest.is_empty() {
                dir.join("manifest.csv")
            } else {
                PathBuf::from(&cfg.run.manifest)
            };
            ingest(&dir, &manifest)?
        };
        let (train, test) = split(corpus.len(), cfg.run.corpus_seed);
        Ok(Self { corpus, train, test })
    }

    pub fn clips(&self, idx: &[usize]) -> Vec<Waveform> {
        idx.iter().map(|&i| self.corpus.clips[i].waveform.clone()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.corpus.clips[i].label).collect()
    }

    pub fn train_clips(&self) -> Vec<Waveform> {
        self.clips(&self.train)
    }

    pub fn test_clips(&self) -> Vec<Waveform> {
        self.clips(&self.test)
    }

    /// `n` clips never used for pre-training. Synthetic corpora draw a fresh
    /// class-balanced set from an independent seed; ingested corpora fall
    /// back to the test split, truncated to `n`.
    pub fn heldout(&self, cfg: &RunConfig, n: usize) -> Result<Vec<Waveform>, Error> {
        if !cfg.run.corpus.is_empty() {
            let mut clips = self.test_clips();
            clips.truncate(n);
            return Ok(clips);
        }
        let classes = self.corpus.num_classes().max(1);
        let spec = SynthSpec {
            clips_per_class: n.div_ceil(classes).max(1),
            ..synth_spec(cfg)
        };
        let fresh = generate(&spec, derive_seed(cfg.run.corpus_seed, &[stage::CORPUS, u64::MAX]))?;
        let per = spec.clips_per_class;
        // Round-robin over the class-major corpus keeps any prefix balanced.
        Ok((0..n)
            .map(|k| fresh.clips[(k % classes) * per + k / classes].waveform.clone())
            .collect())
    }
}

/// Everything one pre-training run is judged by.
pub struct DeskRun {
    pub outcome: PretrainOutcome,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Pooled features of every layer for the train and test splits.
    pub train_features: FeatureSet,
    pub test_features: FeatureSet,
    /// Frozen last-layer linear probe.
    pub probe: ProbeResult,
    /// One row per inference masking mode over held-out clips.
    pub erank: Vec<ErankRow>,
}

impl DeskRun {
    pub fn erank_of(&self, mode: MaskMode) -> Option<f64> {
        self.erank.iter().find(|r| r.mode == mode).map(|r| r.erank)
    }
}

/// Inference masking modes in every effective-rank report.
pub const ERANK_MODES: [MaskMode; 3] = [MaskMode::None, MaskMode::Unstructured, MaskMode::TimeFreq];

/// The probe settings in `cfg` for `kind`.
pub fn probe_config(cfg: &RunConfig, kind: ProbeKind) -> ProbeConfig {
    ProbeConfig {
        epochs: cfg.run.probe_epochs,
        lr: cfg.optim.probe_lr,
        batch: cfg.run.probe_batch,
        weight_decay: cfg.optim.weight_decay,
        seed: cfg.run.seed,
        ..ProbeConfig::new(kind)
    }
}

/// Pre-trains on the training split, probes the last layer on frozen
/// features and reports effective rank on `run.erank_clips` held-out clips.
/// With `out` set, the run directory gets the pre-training artifacts plus
/// `probes.csv` and `erank.csv`.
pub fn desk_run(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    on_step: impl FnMut(&StepMetrics),
) -> Result<DeskRun, Error> {
    let outcome = pretrain(cfg, &data.train_clips(), out, on_step)?;
    let first_loss = outcome.metrics.first().map_or(f64::NAN, |m| m.loss);
    let final_loss = final_window_mean(&outcome.metrics).unwrap_or(f64::NAN);
    let fe = Frontend::new(&cfg.mel, cfg.encoder.patch, outcome.norm)?;
    let seq = cfg.run.deterministic;
    let features = |idx: &[usize]| {
        extract_features(&outcome.store, &cfg.encoder, &fe, &data.clips(idx), &data.labels(idx), Layers::All, seq)
    };
    let (train_features, test_features) = (features(&data.train)?, features(&data.test)?);
    let probe = probe(&train_features, &test_features, &probe_config(cfg, ProbeKind::LinearLast))?;
    let held = data.heldout(cfg, cfg.run.erank_clips)?;
    let erank = erank_report(
        &outcome.store,
        &cfg.encoder,
        &fe,
        &held,
        &cfg.mask_spec(),
        &ERANK_MODES,
        cfg.run.seed,
        seq,
        false,
    )?;
    if let Some(dir) = out {
        append_results_csv(dir.join("probes.csv"), std::slice::from_ref(&probe))?;
        write_erank_csv(dir.join("erank.csv"), &erank)?;
    }
    Ok(DeskRun {
        outcome,
        first_loss,
        final_loss,
        train_features,
        test_features,
        probe,
        erank,
    })
}

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        clips_per_class: cfg.run.clips_per_class,
        ..SynthSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heldout_pool_is_balanced_and_disjoint() {
        let mut cfg = RunConfig::default();
        cfg.set("run.clips_per_class", "4").unwrap();
        let data = Dataset::load(&cfg).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (16, 4));
        let held = data.heldout(&cfg, 12).unwrap();
        assert_eq!(held.len(), 12);
        for w in &held {
            assert!(data.corpus.clips.iter().all(|c| c.waveform != *w));
        }
        assert_eq!(held, data.heldout(&cfg, 12).unwrap());
    }
}
