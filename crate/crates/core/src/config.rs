//! Run configuration: a flat `key = value` text format over the documented
//! keys in [`KEYS`], with every value validated on assignment.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::dsp::{AugmentConfig, MelConfig};
use crate::model::{EncoderConfig, ProjectionConfig};
use crate::patch::{MaskMode, MaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mel.n_mels", "128", "mel filterbank channels"),
    ("mel.win_ms", "25", "analysis window length in ms"),
    ("mel.hop_ms", "10", "frame hop in ms"),
    ("mel.fmin", "20", "lowest filter edge in Hz"),
    ("mel.fmax", "8000", "highest filter edge in Hz"),
    ("mel.log_floor", "1e-10", "energy floor before the logarithm"),
    ("mel.target_frames", "112", "frames after padding or trimming"),
    ("mask.mode", "time_freq", "time | freq | time_freq | unstructured | none"),
    ("mask.rho_t", "0.6", "fraction of time columns removed"),
    ("mask.rho_f", "0.4", "fraction of frequency rows removed"),
    ("mask.rho_u", "matched", "unstructured drop fraction, or `matched` to equal time_freq's budget"),
    ("mask.max_segment", "0", "longest contiguous masked run (0 = ceil(k/2))"),
    ("model.depth", "4", "transformer blocks"),
    ("model.dim", "96", "model width"),
    ("model.heads", "4", "attention heads"),
    ("model.mlp_ratio", "4", "feed-forward expansion"),
    ("model.patch_t", "16", "patch height in frames"),
    ("model.patch_f", "16", "patch width in mel bins"),
    ("model.proj_hidden", "512", "projection head hidden width"),
    ("model.proj_out", "128", "projection output dimension"),
    ("optim.lr", "6e-4", "base learning rate"),
    ("optim.weight_decay", "0.01", "decoupled weight decay"),
    ("optim.beta1", "0.9", "AdamW first-moment decay"),
    ("optim.beta2", "0.999", "AdamW second-moment decay"),
    ("optim.eps", "1e-8", "AdamW epsilon"),
    ("optim.schedule", "fixed", "fixed | warmup_cosine"),
    ("optim.warmup_epochs", "0", "linear warm-up length in epochs"),
    ("optim.min_lr", "1e-6", "cosine floor"),
    ("optim.tau", "0.1", "InfoNCE temperature"),
    ("optim.probe_lr", "0.01", "probe learning rate"),
    ("optim.finetune_lr", "1e-4", "fine-tuning learning rate"),
    ("run.seed", "0", "master seed"),
    ("run.deterministic", "false", "sequential data preparation and null timings"),
    ("run.steps", "2000", "pre-training steps"),
    ("run.batch", "64", "clips per pre-training step"),
    ("run.checkpoint_every", "500", "steps between checkpoints (0 = final only)"),
    ("run.augment", "true", "apply the waveform augmentation chain"),
    ("run.out", "runs/default", "output directory"),
    ("run.corpus", "", "WAV directory to ingest (empty = synthetic corpus)"),
    ("run.manifest", "", "manifest CSV for run.corpus (default <corpus>/manifest.csv)"),
    ("run.clips_per_class", "100", "synthetic clips per class"),
    ("run.corpus_seed", "0", "seed for the synthetic corpus"),
    ("run.probe_epochs", "100", "probe training epochs"),
    ("run.probe_batch", "32", "probe minibatch size"),
    ("run.finetune_epochs", "10", "fine-tuning epochs"),
    ("run.finetune_batch", "32", "fine-tuning minibatch size"),
    ("run.spec_t", "0", "SpecAugment max time width while fine-tuning"),
    ("run.spec_f", "0", "SpecAugment max frequency width while fine-tuning"),
    ("run.roll", "true", "random cyclic roll while fine-tuning"),
    ("run.erank_clips", "256", "held-out clips for effective-rank reports"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleMode,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub tau: f64,
    pub probe_lr: f64,
    pub finetune_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Fixed,
    WarmupCosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub deterministic: bool,
    pub steps: usize,
    pub batch: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub out: String,
    pub corpus: String,
    pub manifest: String,
    pub clips_per_class: usize,
    pub corpus_seed: u64,
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub spec_t: usize,
    pub spec_f: usize,
    pub roll: bool,
    pub erank_clips: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mel: MelConfig,
    pub mask: MaskSpec,
    /// `mask.rho_u = matched`
    pub rho_u_matched: bool,
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub optim: OptimConfig,
    pub run: RunOptions,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            mel: MelConfig::default(),
            mask: MaskSpec::default(),
            rho_u_matched: true,
            encoder: EncoderConfig::default(),
            projection: ProjectionConfig::default(),
            optim: OptimConfig {
                lr: 0.0,
                weight_decay: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
                schedule: ScheduleMode::Fixed,
                warmup_epochs: 0,
                min_lr: 0.0,
                tau: 0.0,
                probe_lr: 0.0,
                finetune_lr: 0.0,
            },
            run: RunOptions {
                seed: 0,
                deterministic: false,
                steps: 0,
                batch: 0,
                checkpoint_every: 0,
                augment: true,
                out: String::new(),
                corpus: String::new(),
                manifest: String::new(),
                clips_per_class: 0,
                corpus_seed: 0,
                probe_epochs: 0,
                probe_batch: 0,
                finetune_epochs: 0,
                finetune_batch: 0,
                spec_t: 0,
                spec_f: 0,
                roll: true,
                erank_clips: 0,
            },
            augment: AugmentConfig::default(),
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn check(key: &str, value: &str, ok: bool, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            msg: msg.into(),
        })
    }
}

impl RunConfig {
    /// Assigns one key; the value is parsed and range-checked immediately.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let pos = |x: f64| check(key, v, x > 0.0 && x.is_finite(), "must be positive");
        let nonneg = |x: f64| check(key, v, x >= 0.0 && x.is_finite(), "must be non-negative");
        let unit = |x: f64| check(key, v, (0.0..1.0).contains(&x), "must lie in [0, 1)");
        let count = |x: usize| check(key, v, x > 0, "must be at least 1");
        match key {
            "mel.n_mels" => {
                self.mel.n_mels = parse(key, v)?;
                count(self.mel.n_mels)?
            }
            "mel.win_ms" => {
                self.mel.win_ms = parse(key, v)?;
                pos(self.mel.win_ms)?
            }
            "mel.hop_ms" => {
                self.mel.hop_ms = parse(key, v)?;
                pos(self.mel.hop_ms)?
            }
            "mel.fmin" => {
                self.mel.fmin = parse(key, v)?;
                nonneg(self.mel.fmin)?
            }
            "mel.fmax" => {
                self.mel.fmax = parse(key, v)?;
                pos(self.mel.fmax)?
            }
            "mel.log_floor" => {
                self.mel.log_floor = parse(key, v)?;
                pos(self.mel.log_floor)?
            }
            "mel.target_frames" => {
                self.mel.target_frames = parse(key, v)?;
                count(self.mel.target_frames)?
            }
            "mask.mode" => {
                self.mask.mode = v.parse::<MaskMode>().map_err(|msg| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    msg,
                })?
            }
            "mask.rho_t" => {
                self.mask.rho_t = parse(key, v)?;
                unit(self.mask.rho_t)?
            }
            "mask.rho_f" => {
                self.mask.rho_f = parse(key, v)?;
                unit(self.mask.rho_f)?
            }
            "mask.rho_u" => {
                if v == "matched" {
                    self.rho_u_matched = true;
                } else {
                    self.mask.rho_u = parse(key, v)?;
                    unit(self.mask.rho_u)?;
                    self.rho_u_matched = false;
                }
            }
            "mask.max_segment" => {
                let m: usize = parse(key, v)?;
                self.mask.max_segment = (m > 0).then_some(m);
            }
            "model.depth" => {
                self.encoder.depth = parse(key, v)?;
                count(self.encoder.depth)?
            }
            "model.dim" => {
                self.encoder.dim = parse(key, v)?;
                check(key, v, self.encoder.dim > 0 && self.encoder.dim % 4 == 0, "must be a positive multiple of 4")?
            }
            "model.heads" => {
                self.encoder.heads = parse(key, v)?;
                count(self.encoder.heads)?
            }
            "model.mlp_ratio" => {
                self.encoder.mlp_ratio = parse(key, v)?;
                count(self.encoder.mlp_ratio)?
            }
            "model.patch_t" => {
                self.encoder.patch.0 = parse(key, v)?;
                count(self.encoder.patch.0)?
            }
            "model.patch_f" => {
                self.encoder.patch.1 = parse(key, v)?;
                count(self.encoder.patch.1)?
            }
            "model.proj_hidden" => {
                self.projection.hidden = parse(key, v)?;
                count(self.projection.hidden)?
            }
            "model.proj_out" => {
                self.projection.out = parse(key, v)?;
                count(self.projection.out)?
            }
            "optim.lr" => {
                self.optim.lr = parse(key, v)?;
                nonneg(self.optim.lr)?
            }
            "optim.weight_decay" => {
                self.optim.weight_decay = parse(key, v)?;
                nonneg(self.optim.weight_decay)?
            }
            "optim.beta1" => {
                self.optim.beta1 = parse(key, v)?;
                unit(self.optim.beta1)?
            }
            "optim.beta2" => {
                self.optim.beta2 = parse(key, v)?;
                unit(self.optim.beta2)?
            }
            "optim.eps" => {
                self.optim.eps = parse(key, v)?;
                pos(self.optim.eps)?
            }
            "optim.schedule" => {
                self.optim.schedule = match v {
                    "fixed" => ScheduleMode::Fixed,
                    "warmup_cosine" => ScheduleMode::WarmupCosine,
                    _ => return check(key, v, false, "expected fixed or warmup_cosine"),
                }
            }
            "optim.warmup_epochs" => self.optim.warmup_epochs = parse(key, v)?,
            "optim.min_lr" => {
                self.optim.min_lr = parse(key, v)?;
                nonneg(self.optim.min_lr)?
            }
            "optim.tau" => {
                self.optim.tau = parse(key, v)?;
                pos(self.optim.tau)?
            }
            "optim.probe_lr" => {
                self.optim.probe_lr = parse(key, v)?;
                nonneg(self.optim.probe_lr)?
            }
            "optim.finetune_lr" => {
                self.optim.finetune_lr = parse(key, v)?;
                nonneg(self.optim.finetune_lr)?
            }
            "run.seed" => self.run.seed = parse(key, v)?,
            "run.deterministic" => self.run.deterministic = parse(key, v)?,
            "run.steps" => self.run.steps = parse(key, v)?,
            "run.batch" => {
                self.run.batch = parse(key, v)?;
                check(key, v, self.run.batch >= 2, "pre-training needs at least 2 clips per batch")?
            }
            "run.checkpoint_every" => self.run.checkpoint_every = parse(key, v)?,
            "run.augment" => self.run.augment = parse(key, v)?,
            "run.out" => self.run.out = v.to_string(),
            "run.corpus" => self.run.corpus = v.to_string(),
            "run.manifest" => self.run.manifest = v.to_string(),
            "run.clips_per_class" => {
                self.run.clips_per_class = parse(key, v)?;
                count(self.run.clips_per_class)?
            }
            "run.corpus_seed" => self.run.corpus_seed = parse(key, v)?,
            "run.probe_epochs" => self.run.probe_epochs = parse(key, v)?,
            "run.probe_batch" => {
                self.run.probe_batch = parse(key, v)?;
                count(self.run.probe_batch)?
            }
            "run.finetune_epochs" => self.run.finetune_epochs = parse(key, v)?,
            "run.finetune_batch" => {
                self.run.finetune_batch = parse(key, v)?;
                check(key, v, self.run.finetune_batch >= 2, "must be at least 2")?
            }
            "run.spec_t" => self.run.spec_t = parse(key, v)?,
            "run.spec_f" => self.run.spec_f = parse(key, v)?,
            "run.roll" => self.run.roll = parse(key, v)?,
            "run.erank_clips" => {
                self.run.erank_clips = parse(key, v)?;
                check(key, v, self.run.erank_clips >= 2, "must be at least 2")?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in the same textual form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let s = match key {
            "mel.n_mels" => self.mel.n_mels.to_string(),
            "mel.win_ms" => self.mel.win_ms.to_string(),
            "mel.hop_ms" => self.mel.hop_ms.to_string(),
            "mel.fmin" => self.mel.fmin.to_string(),
            "mel.fmax" => self.mel.fmax.to_string(),
            "mel.log_floor" => self.mel.log_floor.to_string(),
            "mel.target_frames" => self.mel.target_frames.to_string(),
            "mask.mode" => self.mask.mode.to_string(),
            "mask.rho_t" => self.mask.rho_t.to_string(),
            "mask.rho_f" => self.mask.rho_f.to_string(),
            "mask.rho_u" if self.rho_u_matched => "matched".to_string(),
            "mask.rho_u" => self.mask.rho_u.to_string(),
            "mask.max_segment" => self.mask.max_segment.unwrap_or(0).to_string(),
            "model.depth" => self.encoder.depth.to_string(),
            "model.dim" => self.encoder.dim.to_string(),
            "model.heads" => self.encoder.heads.to_string(),
            "model.mlp_ratio" => self.encoder.mlp_ratio.to_string(),
            "model.patch_t" => self.encoder.patch.0.to_string(),
            "model.patch_f" => self.encoder.patch.1.to_string(),
            "model.proj_hidden" => self.projection.hidden.to_string(),
            "model.proj_out" => self.projection.out.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "optim.schedule" => match self.optim.schedule {
                ScheduleMode::Fixed => "fixed".into(),
                ScheduleMode::WarmupCosine => "warmup_cosine".into(),
            },
            "optim.warmup_epochs" => self.optim.warmup_epochs.to_string(),
            "optim.min_lr" => self.optim.min_lr.to_string(),
            "optim.tau" => self.optim.tau.to_string(),
            "optim.probe_lr" => self.optim.probe_lr.to_string(),
            "optim.finetune_lr" => self.optim.finetune_lr.to_string(),
            "run.seed" => self.run.seed.to_string(),
            "run.deterministic" => self.run.deterministic.to_string(),
            "run.steps" => self.run.steps.to_string(),
            "run.batch" => self.run.batch.to_string(),
            "run.checkpoint_every" => self.run.checkpoint_every.to_string(),
            "run.augment" => self.run.augment.to_string(),
            "run.out" => self.run.out.clone(),
            "run.corpus" => self.run.corpus.clone(),
            "run.manifest" => self.run.manifest.clone(),
            "run.clips_per_class" => self.run.clips_per_class.to_string(),
            "run.corpus_seed" => self.run.corpus_seed.to_string(),
            "run.probe_epochs" => self.run.probe_epochs.to_string(),
            "run.probe_batch" => self.run.probe_batch.to_string(),
            "run.finetune_epochs" => self.run.finetune_epochs.to_string(),
            "run.finetune_batch" => self.run.finetune_batch.to_string(),
            "run.spec_t" => self.run.spec_t.to_string(),
            "run.spec_f" => self.run.spec_f.to_string(),
            "run.roll" => self.run.roll.to_string(),
            "run.erank_clips" => self.run.erank_clips.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
        Ok(s)
    }

    /// Every key with its current value, sorted by key.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _, _)| (k.to_string(), self.get(k).expect("documented key")))
            .collect()
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_snapshot(snapshot: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in snapshot {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.snapshot()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Cross-key checks that single assignments cannot catch.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.mel.validate() {
            return inv(e.to_string());
        }
        if let Err(e) = self.encoder.validate() {
            return inv(e.to_string());
        }
        let (pt, pf) = self.encoder.patch;
        if self.mel.target_frames % pt != 0 || self.mel.n_mels % pf != 0 {
            return inv(format!(
                "{} x {} spectrogram is not divisible into {pt} x {pf} patches",
                self.mel.target_frames, self.mel.n_mels
            ));
        }
        let mask = self.mask_spec();
        if let Err(e) = mask.validate() {
            return inv(e.to_string());
        }
        if mask.visible_count(self.grid()) == 0 {
            return inv("mask removes every token".into());
        }
        Ok(())
    }

    /// Patch grid `(T_p, F_p)` implied by the spectrogram and patch sizes.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.mel.target_frames / self.encoder.patch.0,
            self.mel.n_mels / self.encoder.patch.1,
        )
    }

    /// Mask spec with `rho_u = matched` resolved against the patch grid.
    pub fn mask_spec(&self) -> MaskSpec {
        if self.rho_u_matched {
            let m = self.mask.with_mode(MaskMode::TimeFreq).matched_unstructured(self.grid());
            MaskSpec {
                mode: self.mask.mode,
                rho_u: m.rho_u,
                ..self.mask.clone()
            }
        } else {
            self.mask.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.run.augment {
            self.augment.clone()
        } else {
            AugmentConfig::none()
        }
    }

    /// Key listing for `--help`.
    pub fn help_table() -> String {
        let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        KEYS.iter()
            .map(|(k, d, doc)| {
                let d = if d.is_empty() { "\"\"" } else { d };
                format!("  {k:<width$}  {doc} [default: {d}]\n")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.encoder.dim, 96);
        assert_eq!(cfg.mel.target_frames, 112);
        assert_eq!(cfg.optim.lr, 6e-4);
        assert_eq!(cfg.optim.tau, 0.1);
        cfg.validate().unwrap();
        let mut back = RunConfig::default();
        back.set("model.depth", "2").unwrap();
        back.apply_text(&cfg.to_text(), "t").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_snapshot(&cfg.snapshot()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_gettable_and_documented() {
        let cfg = RunConfig::default();
        for (k, d, _) in KEYS {
            let mut from_default = cfg.clone();
            from_default.set(k, d).unwrap();
            let mut from_get = cfg.clone();
            from_get.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(from_default, cfg, "{k}");
            assert_eq!(from_get, cfg, "{k}");
        }
        let help = RunConfig::help_table();
        assert!(KEYS.iter().all(|(k, _, _)| help.contains(k)));
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.set("model.width", "3"), Err(ConfigError::UnknownKey("model.width".into())));
        assert!(cfg.set("mask.rho_t", "1.0").is_err());
        assert!(cfg.set("optim.tau", "0").is_err());
        assert!(cfg.set("mask.mode", "diagonal").is_err());
        assert!(cfg.set("run.batch", "1").is_err());
        assert!(cfg.set("model.dim", "abc").is_err());
        assert!(matches!(cfg.apply_text("model.depth 3", "x.cfg"), Err(ConfigError::Syntax { line: 1, .. })));
        cfg.set("mel.target_frames", "100").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn matched_unstructured_budget() {
        let mut cfg = RunConfig::default();
        cfg.set("mask.mode", "unstructured").unwrap();
        let m = cfg.mask_spec();
        assert_eq!(m.visible_count(cfg.grid()), 15);
        cfg.set("mask.rho_u", "0.5").unwrap();
        assert_eq!(cfg.mask_spec().visible_count(cfg.grid()), 28);
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = RunConfig::from_file(Path::new("missing.cfg")).unwrap_err();
        assert!(e.to_string().contains("missing.cfg"));
    }
}
