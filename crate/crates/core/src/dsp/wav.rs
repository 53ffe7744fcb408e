use std::io::{self, ErrorKind};
use std::path::Path;

use thiserror::Error;

use super::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed RIFF: {0}")]
    Malformed(String),
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("zero-length audio payload")]
    Empty,
    #[error("invalid waveform: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn map_hound(path: &Path, e: hound::Error) -> WavError {
    match e {
        hound::Error::FormatError(msg) => WavError::Malformed(msg.to_string()),
        hound::Error::Unsupported => WavError::UnsupportedCodec("unsupported WAVE format".into()),
        hound::Error::IoError(err)
            if matches!(err.kind(), ErrorKind::UnexpectedEof | ErrorKind::Other) =>
        {
            WavError::Malformed(format!("truncated file ({err})"))
        }
        hound::Error::IoError(source) => WavError::Io {
            path: path.display().to_string(),
            source,
        },
        other => WavError::Malformed(other.to_string()),
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file, averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = hound::WavReader::new(io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(WavError::Malformed("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(WavError::UnsupportedCodec(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if interleaved.len() < channels {
        return Err(WavError::Empty);
    }
    let samples: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate).map_err(|e| WavError::Invalid(e.to_string()))
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), WavError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, fmt: hound::SampleFormat, bits: u16, data: &[f32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: bits,
            sample_format: fmt,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &x in data {
            match fmt {
                hound::SampleFormat::Float => w.write_sample(x).unwrap(),
                hound::SampleFormat::Int if bits == 16 => w.write_sample(x as i16).unwrap(),
                hound::SampleFormat::Int => w.write_sample(x as i32).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 1, hound::SampleFormat::Int, 16, &[16384.0, -32768.0]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples(), &[0.5, -1.0]);
        assert_eq!(w.sample_rate(), 16000);
    }

    #[test]
    fn stereo_float_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 2, hound::SampleFormat::Float, 32, &[0.2, 0.4, -0.5, 0.5]);
        let w = load_wav(&p).unwrap();
        assert!((w.samples()[0] - 0.3).abs() < 1e-7);
        assert!(w.samples()[1].abs() < 1e-12);
    }

    #[test]
    fn truncated_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        std::fs::write(&p, b"RIFF\x10\x00\x00\x00WAVEfm").unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(matches!(err, WavError::Malformed(_)), "{err:?}");
        assert!(err.to_string().starts_with("malformed RIFF"));
    }

    #[test]
    fn pcm24_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.wav");
        write_raw(&p, 1, hound::SampleFormat::Int, 24, &[1.0, 2.0]);
        assert!(matches!(load_wav(&p), Err(WavError::UnsupportedCodec(_))));
    }

    #[test]
    fn empty_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_raw(&p, 1, hound::SampleFormat::Int, 16, &[]);
        assert!(matches!(load_wav(&p), Err(WavError::Empty)));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let w = Waveform::new(vec![0.0, 0.25, -0.5], 8000).unwrap();
        write_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
