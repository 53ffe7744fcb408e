use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const SPECTROGRAM_MAGIC: &[u8; 4] = b"MOSA";

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("buffer of {got} values does not fill {frames} x {bins}")]
    Size {
        frames: usize,
        bins: usize,
        got: usize,
    },
    #[error("bad spectrogram file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Log-Mel matrix, `frames × bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<f32>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<f32>) -> Result<Self, SpectrogramError> {
        if frames * bins != values.len() {
            return Err(SpectrogramError::Size {
                frames,
                bins,
                got: values.len(),
            });
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn at(&self, t: usize, f: usize) -> f32 {
        self.values[t * self.bins + f]
    }

    /// Truncates or extends the frame axis to `target`, filling new frames with `fill`.
    pub fn pad_or_trim(&self, target: usize, fill: f32) -> Spectrogram {
        let mut values = self.values.clone();
        values.resize(target * self.bins, fill);
        Spectrogram {
            frames: target,
            bins: self.bins,
            values,
        }
    }

    /// `(x - mean) / (2 std)`.
    pub fn normalize(&self, mean: f64, std: f64) -> Spectrogram {
        assert!(std > 0.0, "normalization std must be positive");
        let scale = 1.0 / (2.0 * std);
        Spectrogram {
            frames: self.frames,
            bins: self.bins,
            values: self
                .values
                .iter()
                .map(|&v| ((v as f64 - mean) * scale) as f32)
                .collect(),
        }
    }

    /// 16-byte header (`MOSA`, frames, bins, reserved) then little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), SpectrogramError> {
        w.write_all(SPECTROGRAM_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bins as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SpectrogramError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| SpectrogramError::Format("truncated header".into()))?;
        if &header[..4] != SPECTROGRAM_MAGIC {
            return Err(SpectrogramError::Format("missing MOSA magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (frames, bins) = (word(4), word(8));
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != frames * bins * 4 {
            return Err(SpectrogramError::Format(format!(
                "payload of {} bytes, expected {}",
                raw.len(),
                frames * bins * 4
            )));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, bins, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SpectrogramError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpectrogramError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn mean_std(&self) -> (f64, f64) {
        corpus_stats(std::iter::once(self))
    }
}

/// Two-pass mean and population standard deviation over every entry.
pub fn corpus_stats<'a>(specs: impl Iterator<Item = &'a Spectrogram> + Clone) -> (f64, f64) {
    let (sum, count) = specs.clone().fold((0.0, 0usize), |(s, n), sp| {
        (
            s + sp.values.iter().map(|&v| v as f64).sum::<f64>(),
            n + sp.values.len(),
        )
    });
    let mean = sum / count.max(1) as f64;
    let ss: f64 = specs
        .map(|sp| {
            sp.values
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
        })
        .sum();
    (mean, (ss / count.max(1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(frames: usize, bins: usize) -> Spectrogram {
        Spectrogram::new(frames, bins, (0..frames * bins).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn pad_trim_and_identity() {
        let s = ramp(998, 128);
        let p = s.pad_or_trim(1024, -7.0);
        assert_eq!(p.frames(), 1024);
        assert_eq!(&p.values()[..998 * 128], s.values());
        assert!(p.values()[998 * 128..].iter().all(|&v| v == -7.0));
        assert_eq!(p.values().len() - s.values().len(), 26 * 128);
        let full = ramp(1024, 128);
        assert_eq!(full.pad_or_trim(1024, 0.0), full);
        let long = ramp(1100, 128);
        let t = long.pad_or_trim(1024, 0.0);
        assert_eq!(t.values(), &long.values()[..1024 * 128]);
    }

    #[test]
    fn normalization_constants() {
        let s = Spectrogram::new(1, 2, vec![-4.268, 1.0]).unwrap();
        let n = s.normalize(-4.268, 4.569);
        assert!(n.values()[0].abs() < 1e-7);
        let u = Spectrogram::new(1, 1, vec![1.0]).unwrap().normalize(0.0, 0.5);
        assert_eq!(u.values()[0], 1.0);
    }

    #[test]
    fn two_pass_stats_match_direct_formula() {
        let a = Spectrogram::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Spectrogram::new(1, 2, vec![5.0, 6.0]).unwrap();
        let (m, s) = corpus_stats([&a, &b].into_iter());
        assert!((m - 3.5).abs() < 1e-12);
        let var = (0..6).map(|i| (i as f64 + 1.0 - 3.5).powi(2)).sum::<f64>() / 6.0;
        assert!((s - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn header_layout() {
        let s = Spectrogram::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MOSA");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &[0, 0, 0, 0]);
        assert_eq!(buf.len(), 16 + 24);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert!(Spectrogram::read_from(&b"MOSX0000000000000000"[..]).is_err());
        assert!(Spectrogram::read_from(&buf[..30]).is_err());
    }

    proptest! {
        #[test]
        fn file_round_trip(frames in 1usize..20, bins in 1usize..10, seed in any::<u32>()) {
            let values: Vec<f32> = (0..frames * bins).map(|i| (i as f32 + seed as f32).sin()).collect();
            let s = Spectrogram::new(frames, bins, values).unwrap();
            let mut buf = Vec::new();
            s.write_to(&mut buf).unwrap();
            prop_assert_eq!(Spectrogram::read_from(&buf[..]).unwrap(), s);
        }
    }
}
