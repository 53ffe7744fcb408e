//! Optimization and the training loops: contrastive pre-training, linear
//! probing of a frozen encoder and full fine-tuning.

mod checkpoint;
mod optim;
mod supervised;

pub use checkpoint::{Array, Checkpoint, BLOB, MANIFEST};
pub use optim::{adamw_step, lr_at, AdamConfig, OptimState, ScheduleConfig};
pub use supervised::{
    cyclic_roll, spec_augment, train_supervised, EpochMetrics, SupervisedMode, SupervisedOutcome, SupervisedSet,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::config::{RunConfig, ScheduleMode};
use crate::dsp::Waveform;
use crate::model::{encode, init_pretrain_model, pool, project, update_running_stats, Mode, ParamStore, ViewBatch};
use crate::objective::info_nce;
use crate::patch::MaskedView;
use crate::pipeline::{make_view, norm_stats, Frontend, ViewKey};
use crate::rng::{derived_rng, stage};
use crate::tensor::Tape;
use crate::Error;

#[derive(Debug, ThisError, Clone, PartialEq)]
pub enum TrainError {
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("non-finite gradient for parameter {param} at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Data(String),
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Tokens fed to the encoder per view.
    pub visible_tokens: usize,
    /// Wall time since the start of the run; `None` in deterministic mode.
    pub seconds: Option<f64>,
}

pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub metrics: Vec<StepMetrics>,
    pub norm: (f64, f64),
    pub checkpoint: Checkpoint,
}

/// Training batches per epoch when the last partial batch is dropped.
/// Steps averaged for the end-of-run loss.
pub const FINAL_WINDOW: usize = 100;

/// Mean loss over the last `min(FINAL_WINDOW, len)` steps.
pub fn final_window_mean(metrics: &[StepMetrics]) -> Option<f64> {
    let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
    (!tail.is_empty()).then(|| tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64)
}

pub fn steps_per_epoch(items: usize, batch: usize) -> usize {
    (items / batch.max(1)).max(1)
}

/// Item indices of the clips drawn at `step`.
pub fn batch_indices(items: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let spe = steps_per_epoch(items, batch);
    let (epoch, pos) = (step / spe, step % spe);
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut derived_rng(seed, &[stage::BATCH_ORDER, epoch as u64]));
    order[pos * batch..(pos + 1) * batch].to_vec()
}

/// Builds both views of each item; the first half of the result holds view 0
/// of every item and the second half view 1.
pub fn pair_views(
    fe: &Frontend,
    clips: &[Waveform],
    items: &[usize],
    cfg: &RunConfig,
    epoch: u64,
) -> Result<Vec<MaskedView>, Error> {
    let aug = cfg.augment_config();
    let mask = cfg.mask_spec();
    let jobs: Vec<(usize, u64)> = (0..2u64).flat_map(|v| items.iter().map(move |&i| (i, v))).collect();
    let build = |&(item, view): &(usize, u64)| {
        let key = ViewKey {
            epoch,
            item: item as u64,
            view,
        };
        make_view(fe, &clips[item], &aug, &mask, cfg.run.seed, key)
    };
    if cfg.run.deterministic {
        jobs.iter().map(build).collect()
    } else {
        jobs.par_iter().map(build).collect()
    }
}

/// Contrastive loss of one batch of paired views on a fresh tape.
fn contrastive_step(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    views: &[MaskedView],
) -> Result<(f64, Vec<Option<Vec<f32>>>, Vec<(String, crate::tensor::BatchStats)>), Error> {
    let b = views.len() / 2;
    let batch = ViewBatch::<f32>::from_views(views, cfg.encoder.dim)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let stack = encode(&mut tape, &p, &cfg.encoder, &batch)?;
    let q = pool(&mut tape, stack.last())?;
    let proj = project(&mut tape, &p, q, Mode::Train)?;
    let zt = tape.slice(proj.z, 0, 0, b)?;
    let zf = tape.slice(proj.z, 0, b, b)?;
    let loss = info_nce(&mut tape, zt, zf, cfg.optim.tau)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let g = p.vars().iter().map(|&v| grads.get(v).map(|s| s.to_vec())).collect();
    Ok((value, g, proj.stats))
}

fn schedule(cfg: &RunConfig, spe: usize, steps: usize, base_lr: f64) -> ScheduleConfig {
    ScheduleConfig {
        mode: cfg.optim.schedule,
        base_lr,
        warmup_epochs: cfg.optim.warmup_epochs as f64,
        total_epochs: match cfg.optim.schedule {
            ScheduleMode::Fixed => 1.0,
            ScheduleMode::WarmupCosine => steps as f64 / spe as f64,
        },
        min_lr: cfg.optim.min_lr,
    }
}

/// Configuration snapshot stored in checkpoints; the output path is left out
/// so that identical runs written to different places stay byte-identical.
pub fn config_snapshot(cfg: &RunConfig) -> std::collections::BTreeMap<String, String> {
    let mut s = cfg.snapshot();
    s.remove("run.out");
    s
}

/// Contrastive pre-training on `clips`.
///
/// With `out` set, writes `metrics.jsonl`, periodic checkpoints under
/// `checkpoints/step-NNNNNN` and the final state under `checkpoint`.
/// `on_step` sees every metrics record as it is produced.
pub fn pretrain(
    cfg: &RunConfig,
    clips: &[Waveform],
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<PretrainOutcome, Error> {
    cfg.validate()?;
    let (b, steps) = (cfg.run.batch, cfg.run.steps);
    if clips.is_empty() {
        return Err(TrainError::Data("pre-training corpus is empty".into()).into());
    }
    if b < 2 || b > clips.len() {
        return Err(Error::Invalid(format!(
            "batch size {b} must lie between 2 and the {} training clips",
            clips.len()
        )));
    }
    let norm = norm_stats(&cfg.mel, clips.iter())?;
    let fe = Frontend::new(&cfg.mel, cfg.encoder.patch, norm)?;
    let mut store = init_pretrain_model::<f32>(&cfg.encoder, &cfg.projection, cfg.run.seed)?;
    let mut optim = OptimState::new(&store, AdamConfig::from(&cfg.optim));
    let spe = steps_per_epoch(clips.len(), b);
    let sched = schedule(cfg, spe, steps, cfg.optim.lr);
    sched.validate()?;

    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(Error::io(&path))?, path))
        }
        None => None,
    };
    let snapshot_ck = |store: &ParamStore<f32>, optim: &OptimState<f32>| {
        let mut ck = Checkpoint::from_training(store, Some(optim));
        ck.seed = cfg.run.seed;
        ck.norm = norm;
        ck.config = config_snapshot(cfg);
        ck
    };

    let start = Instant::now();
    let mut metrics = Vec::with_capacity(steps);
    for step in 0..steps {
        let epoch = (step / spe) as u64;
        let items = batch_indices(clips.len(), b, step, cfg.run.seed);
        let views = pair_views(&fe, clips, &items, cfg, epoch)?;
        let visible = views[0].visible_count();
        let (loss, grads, stats) = contrastive_step(&store, cfg, &views)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss }.into());
        }
        let lr = lr_at(step, &sched, spe);
        let g: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
        adamw_step(&mut store, &g, &mut optim, lr)?;
        update_running_stats(&mut store, &stats)?;

        let m = StepMetrics {
            step,
            loss,
            lr,
            visible_tokens: visible,
            seconds: (!cfg.run.deterministic).then(|| start.elapsed().as_secs_f64()),
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(f, "{line}").map_err(Error::io(&*path))?;
        }
        on_step(&m);
        metrics.push(m);

        let k = cfg.run.checkpoint_every;
        if let Some(dir) = out {
            if k > 0 && (step + 1) % k == 0 && step + 1 < steps {
                snapshot_ck(&store, &optim).save(dir.join("checkpoints").join(format!("step-{:06}", step + 1)))?;
            }
        }
    }
    let checkpoint = snapshot_ck(&store, &optim);
    if let Some(dir) = out {
        checkpoint.save(dir.join("checkpoint"))?;
    }
    Ok(PretrainOutcome {
        store,
        optim,
        metrics,
        norm,
        checkpoint,
    })
}

/// Rebuilds a pre-trained model and its front end from a checkpoint, checking
/// that `cfg` agrees with it on every model and front-end key.
pub fn load_pretrained(cfg: &RunConfig, ck: &Checkpoint) -> Result<(ParamStore<f32>, Frontend), Error> {
    for (k, v) in &ck.config {
        if k.starts_with("model.") || k.starts_with("mel.") {
            let ours = cfg.get(k)?;
            if ours != *v {
                return Err(TrainError::Mismatch(format!("{k} is {ours} here but {v} in the checkpoint")).into());
            }
        }
    }
    let mut store = init_pretrain_model::<f32>(&cfg.encoder, &cfg.projection, 0)?;
    ck.restore_params(&mut store, "")?;
    let fe = Frontend::new(&cfg.mel, cfg.encoder.patch, ck.norm)?;
    Ok((store, fe))
}
