//! Log-Mel front end on a synthetic tone: frame layout, padding and where the
//! energy lands in the filterbank.

use audiomosaic::corpus::{synth_clip, SynthClass, SynthSpec};
use audiomosaic::dsp::{log_mel, MelConfig, MelExtractor, Waveform};

fn main() -> Result<(), audiomosaic::Error> {
    let spec = SynthSpec::default();
    let (tone, f0) = synth_clip(SynthClass::PureTone, &spec, 7);
    let cfg = MelConfig {
        target_frames: 112,
        ..MelConfig::default()
    };
    let mel = MelExtractor::new(&cfg)?;
    let raw = mel.compute(&tone)?;
    let padded = raw.pad_or_trim(cfg.target_frames, cfg.silence_level() as f32);
    println!("1 s clip: {} raw frames, padded to {} x {}", raw.frames(), padded.frames(), padded.bins());

    let centers = mel.center_frequencies();
    let mid = raw.frame(raw.frames() / 2);
    let peak = (0..mid.len()).max_by(|&a, &b| mid[a].total_cmp(&mid[b])).unwrap();
    println!("tone at {f0:.1} Hz peaks in bin {peak} (center {:.1} Hz)", centers[peak]);

    let ten = Waveform::new(vec![0.0; 160_000], 16_000)?;
    let long = log_mel(&ten, &MelConfig::default())?;
    let full = long.pad_or_trim(1024, MelConfig::default().silence_level() as f32);
    println!("10 s clip: {} raw frames, padded to {} x {}", long.frames(), full.frames(), full.bins());
    Ok(())
}
