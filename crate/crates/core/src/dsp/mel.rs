use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use super::{Spectrogram, Waveform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MelError {
    #[error("clip too short: {len} samples, window needs {win}")]
    TooShort { len: usize, win: usize },
    #[error("expected {expected} Hz input, got {actual} Hz")]
    WrongRate { expected: u32, actual: u32 },
    #[error("invalid mel config: {0}")]
    Config(String),
}

/// Filterbank front-end settings (Kaldi-style framing).
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Lower clamp applied to filterbank energies before the logarithm.
    pub log_floor: f64,
    pub target_frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            fmin: 20.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            target_frames: 1024,
        }
    }
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Snip-edges frame count, or `None` when the clip is shorter than a window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let win = self.win_samples();
        (len >= win).then(|| 1 + (len - win) / self.hop_samples())
    }

    /// Log energy of an all-silent frame.
    pub fn silence_level(&self) -> f64 {
        self.log_floor.ln()
    }

    pub fn validate(&self) -> Result<(), MelError> {
        let bad = |m: String| Err(MelError::Config(m));
        if !(self.hop_ms > 0.0 && self.win_ms > self.hop_ms) {
            return bad(format!("need win_ms > hop_ms > 0, got {} / {}", self.win_ms, self.hop_ms));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!("filterbank bounds {}..{} Hz invalid", self.fmin, self.fmax));
        }
        if self.target_frames == 0 {
            return bad("target_frames must be positive".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

struct Filter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Reusable log-Mel extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    cfg: MelConfig,
    win: usize,
    hop: usize,
    nfft: usize,
    window: Vec<f64>,
    filters: Vec<Filter>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self, MelError> {
        cfg.validate()?;
        let win = cfg.win_samples();
        let hop = cfg.hop_samples();
        let nfft = win.next_power_of_two();
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        let bin_hz = cfg.sample_rate as f64 / nfft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (
                    lo + m as f64 * step,
                    lo + (m + 1) as f64 * step,
                    lo + (m + 2) as f64 * step,
                );
                let mut first_bin = usize::MAX;
                let mut weights = Vec::new();
                for k in 0..=nfft / 2 {
                    let mel = hz_to_mel(k as f64 * bin_hz);
                    let w = if mel > left && mel < center {
                        (mel - left) / (center - left)
                    } else if mel >= center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        if first_bin == usize::MAX {
                            first_bin = k;
                        }
                        weights.resize(k - first_bin, 0.0);
                        weights.push(w);
                    }
                }
                Filter {
                    first_bin: first_bin.min(nfft / 2),
                    weights,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(Self {
            cfg: cfg.clone(),
            win,
            hop,
            nfft,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centre frequency of every filter in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let lo = hz_to_mel(self.cfg.fmin);
        let step = (hz_to_mel(self.cfg.fmax) - lo) / (self.cfg.n_mels + 1) as f64;
        (0..self.cfg.n_mels)
            .map(|m| mel_to_hz(lo + (m + 1) as f64 * step))
            .collect()
    }

    /// Natural-log Mel energies, one row per frame (no padding).
    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram, MelError> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(MelError::WrongRate {
                expected: self.cfg.sample_rate,
                actual: w.sample_rate(),
            });
        }
        let x = w.samples();
        let frames = self.cfg.frame_count(x.len()).ok_or(MelError::TooShort {
            len: x.len(),
            win: self.win,
        })?;
        let bins = self.cfg.n_mels;
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.nfft / 2 + 1];
        for f in 0..frames {
            let frame = &x[f * self.hop..f * self.hop + self.win];
            let dc = frame.iter().sum::<f64>() / self.win as f64;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.win {
                    Complex::new((frame[i] - dc) * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt
                    .weights
                    .iter()
                    .zip(&power[filt.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                values.push(e.max(self.cfg.log_floor).ln() as f32);
            }
        }
        Ok(Spectrogram::new(frames, bins, values).expect("frame buffer size"))
    }
}

/// One-shot log-Mel of a 16 kHz waveform.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram, MelError> {
    MelExtractor::new(cfg)?.compute(w)
}
