//! Synthetic labelled audio and WAV-directory ingestion.
//!
//! The five generator classes differ either spectrally (tone, harmonic stack,
//! band noise) or temporally (chirp, amplitude modulation), so a useful
//! representation has to keep both kinds of cue.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::dsp::{load_wav, resample_linear, write_wav, WavError, Waveform};
use crate::rng::{derive_seed, derived_rng, rng_from, stage};

pub const PEAK_LIMIT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("manifest {path} has no rows")]
    EmptyManifest { path: String },
    #[error("manifest {path} line {line}: {msg}")]
    BadRow { path: String, line: usize, msg: String },
    #[error("missing audio file {0}")]
    MissingFile(String),
    #[error("{path}: {source}")]
    Wav { path: String, source: WavError },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthClass {
    PureTone,
    HarmonicStack,
    LinearChirp,
    BandNoise,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 5] = [
        SynthClass::PureTone,
        SynthClass::HarmonicStack,
        SynthClass::LinearChirp,
        SynthClass::BandNoise,
        SynthClass::AmTone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::PureTone => "pure_tone",
            SynthClass::HarmonicStack => "harmonic_stack",
            SynthClass::LinearChirp => "linear_chirp",
            SynthClass::BandNoise => "band_noise",
            SynthClass::AmTone => "am_tone",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Peak level range; every clip's peak is drawn from it.
    pub level: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: SynthClass::ALL.to_vec(),
            clips_per_class: 100,
            duration_s: 1.0,
            sample_rate: 16000,
            level: (0.3, PEAK_LIMIT),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.classes.len() < 2 {
            return bad("need at least two classes");
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be positive");
        }
        if self.samples() < (0.025 * self.sample_rate as f64).round() as usize {
            return bad("clips shorter than one analysis window");
        }
        if !(self.level.0 > 0.0 && self.level.0 <= self.level.1 && self.level.1 <= PEAK_LIMIT) {
            return bad("level range must lie in (0, 0.9]");
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub label: usize,
    pub waveform: Waveform,
    /// Primary drawn frequency of a synthetic clip: the tone or carrier
    /// frequency, the harmonic fundamental, the chirp start or the lower band
    /// edge.
    pub f0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub clips: Vec<LabeledClip>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            class_names: self.class_names.clone(),
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }

    /// Writes every clip as `<id>.wav` plus a `manifest.csv` readable by
    /// [`ingest`].
    pub fn export_wav(&self, dir: &Path) -> Result<PathBuf, CorpusError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| CorpusError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let manifest = dir.join("manifest.csv");
        let mut f = std::fs::File::create(&manifest).map_err(io(&manifest))?;
        for c in &self.clips {
            let name = format!("{}.wav", c.id);
            let path = dir.join(&name);
            write_wav(&path, &c.waveform).map_err(|source| CorpusError::Wav {
                path: path.display().to_string(),
                source,
            })?;
            writeln!(f, "{name},{}", self.class_names[c.label]).map_err(io(&manifest))?;
        }
        Ok(manifest)
    }
}

fn scale_to_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        let g = peak / m;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn octave_noise(n: usize, lo: f64, sr: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > 2.0 * lo {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// One clip of `class`, fully determined by `seed`.
pub fn synth_clip(class: SynthClass, spec: &SynthSpec, seed: u64) -> (Waveform, f64) {
    let mut rng = rng_from(seed);
    let n = spec.samples();
    let sr = spec.sample_rate as f64;
    let peak = rng.gen_range(spec.level.0..=spec.level.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let t = |i: usize| i as f64 / sr;
    let (mut x, f0): (Vec<f64>, f64) = match class {
        SynthClass::PureTone => {
            let f0 = rng.gen_range(300.0..=600.0);
            ((0..n).map(|i| (2.0 * PI * f0 * t(i) + phase).sin()).collect(), f0)
        }
        SynthClass::HarmonicStack => {
            let f0 = rng.gen_range(150.0..=300.0);
            let x = (0..n)
                .map(|i| {
                    (1..=4)
                        .map(|h| (2.0 * PI * f0 * h as f64 * t(i) + phase * h as f64).sin() / h as f64)
                        .sum()
                })
                .collect();
            (x, f0)
        }
        SynthClass::LinearChirp => {
            let (f0, f1) = (200.0, 4000.0);
            let dur = n as f64 / sr;
            let x = (0..n)
                .map(|i| {
                    let s = t(i);
                    (2.0 * PI * (f0 * s + (f1 - f0) * s * s / (2.0 * dur)) + phase).sin()
                })
                .collect();
            (x, f0)
        }
        SynthClass::BandNoise => {
            let lo = 250.0 * 2f64.powf(rng.gen_range(0.0..3.5));
            (octave_noise(n, lo, sr, &mut rng), lo)
        }
        SynthClass::AmTone => {
            let fc = rng.gen_range(300.0..=600.0);
            let fm = rng.gen_range(4.0..=8.0);
            let depth = 0.8;
            let x = (0..n)
                .map(|i| {
                    let env = 1.0 + depth * (2.0 * PI * fm * t(i)).sin();
                    env * (2.0 * PI * fc * t(i) + phase).sin()
                })
                .collect();
            (x, fc)
        }
    };
    scale_to_peak(&mut x, peak);
    (Waveform::new(x, spec.sample_rate).expect("finite synthetic audio"), f0)
}

/// Class-major corpus with exactly `clips_per_class` clips per class.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.clips_per_class).map(move |i| (c, i)))
        .collect();
    let clips = jobs
        .par_iter()
        .map(|&(c, i)| {
            let class = spec.classes[c];
            let (waveform, f0) = synth_clip(class, spec, derive_seed(seed, &[stage::CORPUS, c as u64, i as u64]));
            LabeledClip {
                id: format!("{}_{i:04}", class.name()),
                label: c,
                waveform,
                f0: Some(f0),
            }
        })
        .collect();
    Ok(Corpus {
        class_names: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        clips,
    })
}

/// Disjoint 80/20 train/test index split from a seeded shuffle.
pub fn split(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut derived_rng(seed, &[stage::SPLIT]));
    let n_train = (len as f64 * 0.8).round() as usize;
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Loads `relative_path,label` rows from `manifest` (paths relative to
/// `dir`), resampling every file to 16 kHz mono. Class indices follow the
/// order in which labels first appear.
pub fn ingest(dir: &Path, manifest: &Path) -> Result<Corpus, CorpusError> {
    let mpath = manifest.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => CorpusError::Io {
                path: mpath.clone(),
                source,
            },
            other => CorpusError::BadRow {
                path: mpath.clone(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut classes: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| CorpusError::BadRow {
            path: mpath.clone(),
            line,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(CorpusError::BadRow {
                path: mpath.clone(),
                line,
                msg: "expected `relative_path,label`".into(),
            });
        }
        let label = *lookup.entry(rec[1].to_string()).or_insert_with(|| {
            classes.push(rec[1].to_string());
            classes.len() - 1
        });
        rows.push((rec[0].to_string(), label));
    }
    if rows.is_empty() {
        return Err(CorpusError::EmptyManifest { path: mpath });
    }
    let clips = rows
        .into_iter()
        .map(|(rel, label)| {
            let path = dir.join(&rel);
            if !path.is_file() {
                return Err(CorpusError::MissingFile(path.display().to_string()));
            }
            let wav = |source| CorpusError::Wav {
                path: path.display().to_string(),
                source,
            };
            let w = load_wav(&path).map_err(wav)?;
            let w = resample_linear(&w, 16000).map_err(|e| wav(WavError::Invalid(e.to_string())))?;
            let id = Path::new(&rel)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(rel.clone());
            Ok(LabeledClip {
                id,
                label,
                waveform: w,
                f0: None,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus {
        class_names: classes,
        clips,
    })
}
