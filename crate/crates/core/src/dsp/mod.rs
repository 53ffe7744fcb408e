//! Audio front end: WAV I/O, resampling, the waveform augmentation chain and
//! log-Mel spectrograms.

mod augment;
mod filters;
mod mel;
mod spectrogram;
mod wav;

pub use augment::{augment_waveform, augment_with_trace, AugmentConfig, AugmentTrace, StageRange};
pub use filters::{apply_biquad, Biquad};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelConfig, MelError, MelExtractor};
pub use spectrogram::{corpus_stats, Spectrogram, SpectrogramError, SPECTROGRAM_MAGIC};
pub use wav::{load_wav, write_wav, WavError};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("waveform is empty")]
    Empty,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Mono audio buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, WaveformError> {
        if sample_rate == 0 {
            return Err(WaveformError::ZeroRate);
        }
        if samples.is_empty() {
            return Err(WaveformError::Empty);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(WaveformError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert!(!samples.is_empty());
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads `src` at fractional positions `i * step` with linear interpolation,
/// producing `out_len` samples.
pub(crate) fn interpolate(src: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    let last = src.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            src[lo] + (src[hi] - src[lo]) * frac.clamp(0.0, 1.0)
        })
        .collect()
}

/// Linear-interpolation resampler; identity when the rates already match.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> Result<Waveform, WaveformError> {
    if target_rate == 0 {
        return Err(WaveformError::ZeroRate);
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let out_len =
        ((w.len() as f64 * target_rate as f64 / w.sample_rate as f64).round() as usize).max(1);
    let step = w.sample_rate as f64 / target_rate as f64;
    Waveform::new(interpolate(&w.samples, step, out_len), target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn waveform_validation() {
        assert_eq!(Waveform::new(vec![], 16000), Err(WaveformError::Empty));
        assert_eq!(Waveform::new(vec![0.0], 0), Err(WaveformError::ZeroRate));
        assert_eq!(
            Waveform::new(vec![0.0, f64::NAN], 16000),
            Err(WaveformError::NonFinite(1))
        );
    }

    #[test]
    fn same_rate_is_bit_identical() {
        let w = Waveform::new(vec![0.1, -0.3, 0.25], 16000).unwrap();
        assert_eq!(resample_linear(&w, 16000).unwrap(), w);
    }

    #[test]
    fn constant_stays_constant() {
        let w = Waveform::new(vec![0.7; 800], 8000).unwrap();
        let r = resample_linear(&w, 16000).unwrap();
        assert_eq!(r.len(), 1600);
        assert!(r.samples().iter().all(|&s| (s - 0.7).abs() < 1e-15));
    }

    #[test]
    fn sine_downsample_matches_closed_form() {
        let tone = |rate: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (2.0 * PI * 1000.0 * i as f64 / rate).sin())
                .collect()
        };
        let w = Waveform::new(tone(48000.0, 48000), 48000).unwrap();
        let r = resample_linear(&w, 16000).unwrap();
        assert_eq!(r.len(), 16000);
        let want = tone(16000.0, 16000);
        let rms = (r
            .samples()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / want.len() as f64)
            .sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    #[test]
    fn output_length_rounds() {
        let w = Waveform::new(vec![0.0; 1001], 44100).unwrap();
        let r = resample_linear(&w, 16000).unwrap();
        assert_eq!(r.len(), (1001.0f64 * 16000.0 / 44100.0).round() as usize);
    }
}
