//! Supervised training on top of a pre-trained encoder: a linear probe with
//! the encoder frozen, or fine-tuning of everything. The projection head is
//! not used; a zero-initialised classifier reads the pooled last layer.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dsp::{Spectrogram, Waveform};
use crate::model::{classify, encode, init_classifier, init_encoder, pool, ParamStore, ViewBatch};
use crate::objective::{accuracy, cross_entropy};
use crate::patch::{patchify, MaskedView};
use crate::pipeline::Frontend;
use crate::rng::{derive_seed, derived_rng, rng_from, stage};
use crate::tensor::{Tape, Tensor};
use crate::Error;

use super::{adamw_step, AdamConfig, Checkpoint, OptimState, TrainError};

pub const CLASSIFIER: &str = "classifier";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisedMode {
    /// Only the classifier learns; the encoder stays bitwise unchanged.
    ProbeFrozen,
    Finetune,
}

/// Labeled clips for one split.
pub struct SupervisedSet<'a> {
    pub clips: &'a [Waveform],
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub struct SupervisedOutcome {
    /// Encoder parameters plus `classifier.*`.
    pub store: ParamStore<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub test_accuracy: f64,
}

/// Replaces one random time band of width `U{0..=max_t}` and one frequency
/// band of width `U{0..=max_f}` with `fill`.
pub fn spec_augment(s: &Spectrogram, max_t: usize, max_f: usize, fill: f32, seed: u64) -> Result<Spectrogram, Error> {
    if max_t >= s.frames() || max_f >= s.bins() {
        return Err(Error::Invalid(format!(
            "SpecAugment widths ({max_t}, {max_f}) must be below the {} x {} spectrogram",
            s.frames(),
            s.bins()
        )));
    }
    let mut rng = rng_from(seed);
    let wt = rng.gen_range(0..=max_t);
    let t0 = rng.gen_range(0..=s.frames() - wt);
    let wf = rng.gen_range(0..=max_f);
    let f0 = rng.gen_range(0..=s.bins() - wf);
    let mut out = s.clone();
    let bins = s.bins();
    let v = out.values_mut();
    for t in t0..t0 + wt {
        v[t * bins..(t + 1) * bins].fill(fill);
    }
    for t in 0..s.frames() {
        v[t * bins + f0..t * bins + f0 + wf].fill(fill);
    }
    Ok(out)
}

/// Rotates the samples left by a uniform offset.
pub fn cyclic_roll(w: &Waveform, seed: u64) -> Waveform {
    let mut s = w.samples().to_vec();
    let k = rng_from(seed).gen_range(0..s.len());
    s.rotate_left(k);
    w.with_samples(s)
}

struct Prep<'a> {
    fe: &'a Frontend,
    cfg: &'a RunConfig,
    mode: SupervisedMode,
}

impl Prep<'_> {
    /// Unmasked view of one clip, with training-time augmentation when `epoch`
    /// is given.
    fn view(&self, w: &Waveform, item: usize, epoch: Option<usize>) -> Result<MaskedView, Error> {
        let (fe, run) = (self.fe, &self.cfg.run);
        let mut spec = match epoch {
            Some(e) if run.roll => {
                let seed = derive_seed(run.seed, &[e as u64, item as u64, 0, stage::ROLL]);
                fe.spectrogram(&cyclic_roll(w, seed))?
            }
            _ => fe.spectrogram(w)?,
        };
        if let (Some(e), SupervisedMode::Finetune) = (epoch, self.mode) {
            if run.spec_t > 0 || run.spec_f > 0 {
                let seed = derive_seed(run.seed, &[e as u64, item as u64, 0, stage::SPEC_AUGMENT]);
                spec = spec_augment(&spec, run.spec_t, run.spec_f, fe.silence(), seed)?;
            }
        }
        let (pt, pf) = self.cfg.encoder.patch;
        Ok(patchify(&spec, pt, pf)?.full_view())
    }

    fn views(&self, set: &SupervisedSet, idx: &[usize], epoch: Option<usize>) -> Result<Vec<MaskedView>, Error> {
        let one = |&i: &usize| self.view(&set.clips[i], i, epoch);
        if self.cfg.run.deterministic {
            idx.iter().map(one).collect()
        } else {
            idx.par_iter().map(one).collect()
        }
    }
}

/// Pooled last-layer features of the frozen encoder, `[n, D]`.
fn pooled(store: &ParamStore<f32>, cfg: &RunConfig, views: &[MaskedView]) -> Result<Tensor<f32>, Error> {
    let batch = ViewBatch::<f32>::from_views(views, cfg.encoder.dim)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let stack = encode(&mut tape, &p, &cfg.encoder, &batch)?;
    let q = pool(&mut tape, stack.last())?;
    Ok(tape.value(q).clone())
}

/// Per-dimension `(mean, 1/std)` of `[n, D]` features.
fn standardizer(x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += *v as f64 / n as f64;
        }
    }
    let mut var = vec![0.0f64; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (*v as f64 - m).powi(2) / n as f64;
        }
    }
    let neg_mean = Tensor::from_fn(&[d], |j| -mean[j] as f32);
    let inv_std = Tensor::from_fn(&[d], |j| if var[j] > 0.0 { (1.0 / var[j].sqrt()) as f32 } else { 1.0 });
    (neg_mean, inv_std)
}

/// Inputs to the classifier: raw clips through a trainable encoder, or fixed
/// features standardized with training-split statistics.
enum Input<'a> {
    Clips(&'a [MaskedView]),
    Features(Tensor<f32>, &'a (Tensor<f32>, Tensor<f32>)),
}

/// Cross-entropy and logits; gradients flow to parameters accepted by
/// `trainable`.
fn forward(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    input: Input,
    labels: &[usize],
    trainable: Option<&dyn Fn(&str) -> bool>,
) -> Result<(f64, Tensor<f32>, Option<Vec<Option<Vec<f32>>>>), Error> {
    let mut tape = Tape::new();
    let p = match trainable {
        Some(f) => store.bind_with(&mut tape, f),
        None => store.bind(&mut tape, false),
    };
    let q = match input {
        Input::Clips(views) => {
            let batch = ViewBatch::<f32>::from_views(views, cfg.encoder.dim)?;
            let stack = encode(&mut tape, &p, &cfg.encoder, &batch)?;
            pool(&mut tape, stack.last())?
        }
        Input::Features(x, (neg_mean, inv_std)) => {
            let x = tape.constant(x);
            let m = tape.constant(neg_mean.clone());
            let s = tape.constant(inv_std.clone());
            let centered = tape.add(x, m)?;
            tape.mul(centered, s)?
        }
    };
    let logits = classify(&mut tape, &p, CLASSIFIER, q)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    let value = tape.value(loss).item() as f64;
    let grads = match trainable {
        Some(_) => {
            let g = tape.backward(loss)?;
            Some(p.vars().iter().map(|&v| g.get(v).map(|s| s.to_vec())).collect())
        }
        None => None,
    };
    Ok((value, tape.value(logits).clone(), grads))
}

fn rows(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(&[idx.len(), d], data).expect("row gather")
}

struct Trainer<'a> {
    prep: Prep<'a>,
    batch: usize,
    /// Frozen-probe state: standardization and cached unaugmented features.
    frozen: Option<((Tensor<f32>, Tensor<f32>), Tensor<f32>, Tensor<f32>)>,
}

impl Trainer<'_> {
    fn features(&self, store: &ParamStore<f32>, set: &SupervisedSet, epoch: Option<usize>) -> Result<Tensor<f32>, Error> {
        let idx: Vec<usize> = (0..set.clips.len()).collect();
        let mut data = Vec::new();
        for chunk in idx.chunks(self.batch.max(1)) {
            let views = self.prep.views(set, chunk, epoch)?;
            data.extend_from_slice(pooled(store, self.prep.cfg, &views)?.data());
        }
        Ok(Tensor::new(&[set.clips.len(), self.prep.cfg.encoder.dim], data)?)
    }

    fn evaluate(&self, store: &ParamStore<f32>, set: &SupervisedSet) -> Result<(f64, f64), Error> {
        let (mut loss, mut hits) = (0.0, 0.0);
        let idx: Vec<usize> = (0..set.clips.len()).collect();
        for chunk in idx.chunks(self.batch.max(1)) {
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let views;
            let input = match &self.frozen {
                Some((st, _, test)) => Input::Features(rows(test, chunk), st),
                None => {
                    views = self.prep.views(set, chunk, None)?;
                    Input::Clips(&views)
                }
            };
            let (l, logits, _) = forward(store, self.prep.cfg, input, &labels, None)?;
            loss += l * chunk.len() as f64;
            hits += accuracy(&logits, &labels) * chunk.len() as f64;
        }
        let n = set.clips.len().max(1) as f64;
        Ok((loss / n, hits / n))
    }
}

/// Trains a classifier over the encoder stored in `ck` and reports test
/// accuracy after every epoch.
///
/// The frozen probe reads pooled features standardized per dimension with
/// training-split statistics; fine-tuning feeds the raw pooled output.
pub fn train_supervised(
    mode: SupervisedMode,
    cfg: &RunConfig,
    ck: &Checkpoint,
    classes: usize,
    train: &SupervisedSet,
    test: &SupervisedSet,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<SupervisedOutcome, Error> {
    cfg.validate()?;
    if classes < 2 || train.labels.iter().chain(test.labels).any(|&y| y >= classes) {
        return Err(TrainError::Data(format!("labels must index {classes} classes, with at least two")).into());
    }
    if train.clips.len() != train.labels.len() || test.clips.len() != test.labels.len() || train.clips.is_empty() {
        return Err(TrainError::Data("clip and label counts differ or the training split is empty".into()).into());
    }
    let (pretrained, fe) = super::load_pretrained(cfg, ck)?;
    let mut store = ParamStore::<f32>::new();
    init_encoder(&mut store, &cfg.encoder, 0)?;
    for p in store.params_mut() {
        p.value = pretrained.get(&p.name)?.clone();
    }
    init_classifier(&mut store, CLASSIFIER, cfg.encoder.dim, classes);

    let (epochs, batch, lr) = match mode {
        SupervisedMode::ProbeFrozen => (cfg.run.probe_epochs, cfg.run.probe_batch, cfg.optim.probe_lr),
        SupervisedMode::Finetune => (cfg.run.finetune_epochs, cfg.run.finetune_batch, cfg.optim.finetune_lr),
    };
    let mut trainer = Trainer {
        prep: Prep { fe: &fe, cfg, mode },
        batch,
        frozen: None,
    };
    if mode == SupervisedMode::ProbeFrozen {
        let tr = trainer.features(&store, train, None)?;
        let te = trainer.features(&store, test, None)?;
        trainer.frozen = Some((standardizer(&tr), tr, te));
    }
    let trainable = |name: &str| mode == SupervisedMode::Finetune || name.starts_with(CLASSIFIER);
    let mut optim = OptimState::new(&store, AdamConfig::from(&cfg.optim));

    let (test_loss, test_accuracy) = trainer.evaluate(&store, test)?;
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        train_loss: None,
        test_loss,
        test_accuracy,
    }];
    on_epoch(&metrics[0]);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.clips.len()).collect();
        order.shuffle(&mut derived_rng(cfg.run.seed, &[stage::PROBE, epoch as u64]));
        let rolled = match &trainer.frozen {
            Some(_) if cfg.run.roll => Some(trainer.features(&store, train, Some(epoch))?),
            _ => None,
        };
        let mut total = 0.0;
        for chunk in order.chunks(batch.max(1)) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let views;
            let input = match &trainer.frozen {
                Some((st, cached, _)) => Input::Features(rows(rolled.as_ref().unwrap_or(cached), chunk), st),
                None => {
                    views = trainer.prep.views(train, chunk, Some(epoch))?;
                    Input::Clips(&views)
                }
            };
            let (l, _, grads) = forward(&store, cfg, input, &labels, Some(&trainable))?;
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: epoch, loss: l }.into());
            }
            total += l * chunk.len() as f64;
            let grads = grads.expect("trainable forward returns gradients");
            let g: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
            adamw_step(&mut store, &g, &mut optim, lr)?;
        }
        let (test_loss, test_accuracy) = trainer.evaluate(&store, test)?;
        let m = EpochMetrics {
            epoch,
            train_loss: Some(total / train.clips.len() as f64),
            test_loss,
            test_accuracy,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    let test_accuracy = metrics.last().expect("initial evaluation").test_accuracy;
    Ok(SupervisedOutcome {
        store,
        metrics,
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, SynthClass, SynthSpec};
    use crate::train::{pretrain, tests::tiny_config};

    #[test]
    fn spec_augment_only_touches_the_drawn_bands() {
        let vals: Vec<f32> = (0..20 * 8).map(|i| i as f32).collect();
        let s = Spectrogram::new(20, 8, vals).unwrap();
        assert_eq!(spec_augment(&s, 0, 0, -9.0, 3).unwrap(), s);
        for seed in 0..50 {
            let out = spec_augment(&s, 6, 3, -9.0, seed).unwrap();
            let rows: Vec<usize> = (0..20).filter(|&t| out.frame(t).iter().all(|&v| v == -9.0)).collect();
            let cols: Vec<usize> = (0..8).filter(|&f| (0..20).all(|t| out.at(t, f) == -9.0)).collect();
            assert!(rows.len() <= 6 && cols.len() <= 3);
            assert!(rows.windows(2).all(|w| w[1] == w[0] + 1) && cols.windows(2).all(|w| w[1] == w[0] + 1));
            for t in 0..20 {
                for f in 0..8 {
                    let masked = rows.contains(&t) || cols.contains(&f);
                    let want = if masked { -9.0 } else { s.at(t, f) };
                    assert_eq!(out.at(t, f), want, "({t}, {f}) seed {seed}");
                }
            }
        }
        assert!(spec_augment(&s, 20, 0, 0.0, 0).is_err());
    }

    #[test]
    fn cyclic_roll_is_a_rotation() {
        let w = Waveform::new((0..101).map(|i| (i as f64 * 0.37).sin()).collect(), 16000).unwrap();
        let r = cyclic_roll(&w, 8);
        let k = (0..101).find(|&k| r.samples()[0] == w.samples()[k]).unwrap();
        let mut back = r.samples().to_vec();
        back.rotate_right(k);
        assert_eq!(back, w.samples());
        let sorted = |x: &[f64]| {
            let mut v = x.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (sorted(w.samples()), sorted(r.samples()));
        assert_eq!(a, b);
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert_eq!(energy(&a).to_bits(), energy(&b).to_bits());
    }

    pub(super) fn two_class_setup() -> (RunConfig, Checkpoint, Vec<Waveform>, Vec<usize>) {
        let mut cfg = tiny_config();
        cfg.set("run.steps", "1").unwrap();
        let spec = SynthSpec {
            classes: vec![SynthClass::PureTone, SynthClass::BandNoise],
            clips_per_class: 8,
            duration_s: 0.5,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec, 2).unwrap();
        let labels = corpus.labels();
        let clips: Vec<Waveform> = corpus.clips.into_iter().map(|c| c.waveform).collect();
        let r = pretrain(&cfg, &clips, None, |_| {}).unwrap();
        (cfg, r.checkpoint, clips, labels)
    }

    #[test]
    fn frozen_probe_separates_tones_from_noise_and_keeps_encoder() {
        let (mut cfg, ck, clips, labels) = two_class_setup();
        cfg.set("run.probe_epochs", "30").unwrap();
        cfg.set("run.probe_batch", "8").unwrap();
        cfg.set("optim.probe_lr", "0.05").unwrap();
        cfg.set("run.roll", "false").unwrap();
        let set = SupervisedSet {
            clips: &clips,
            labels: &labels,
        };
        let r = train_supervised(SupervisedMode::ProbeFrozen, &cfg, &ck, 2, &set, &set, |_| {}).unwrap();
        assert!(r.test_accuracy > 0.9, "{:?}", r.metrics.last());
        for p in r.store.params().iter().filter(|p| p.name.starts_with("encoder.")) {
            let a = ck.array(&format!("param/{}", p.name)).unwrap();
            let same = a.data.iter().zip(p.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}", p.name);
        }
    }

    #[test]
    fn finetune_at_zero_lr_keeps_initial_metrics() {
        let (mut cfg, ck, clips, labels) = two_class_setup();
        cfg.set("optim.finetune_lr", "0").unwrap();
        cfg.set("run.finetune_epochs", "2").unwrap();
        cfg.set("run.spec_t", "8").unwrap();
        cfg.set("run.spec_f", "8").unwrap();
        let set = SupervisedSet {
            clips: &clips,
            labels: &labels,
        };
        let r = train_supervised(SupervisedMode::Finetune, &cfg, &ck, 2, &set, &set, |_| {}).unwrap();
        let first = &r.metrics[0];
        for m in &r.metrics[1..] {
            assert_eq!((m.test_loss, m.test_accuracy), (first.test_loss, first.test_accuracy));
        }
        let bad = SupervisedSet {
            clips: &clips,
            labels: &vec![3; clips.len()],
        };
        assert!(train_supervised(SupervisedMode::Finetune, &cfg, &ck, 2, &bad, &set, |_| {}).is_err());
    }
}
