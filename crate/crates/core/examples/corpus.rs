//! The synthetic five-class corpus: class balance, split sizes, levels and
//! an optional WAV export (`cargo run --example corpus -- <dir>`).

use audiomosaic::corpus::{generate, split, SynthSpec};

fn main() -> Result<(), audiomosaic::Error> {
    let spec = SynthSpec {
        clips_per_class: 20,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec, 0)?;
    let (train, test) = split(corpus.len(), 0);
    println!("{} clips: {} train, {} test", corpus.len(), train.len(), test.len());
    for (c, name) in corpus.class_names.iter().enumerate() {
        let clips: Vec<_> = corpus.clips.iter().filter(|x| x.label == c).collect();
        let peak = clips
            .iter()
            .map(|x| x.waveform.samples().iter().fold(0.0f64, |m, s| m.max(s.abs())))
            .fold(0.0, f64::max);
        let f0: Vec<f64> = clips.iter().filter_map(|x| x.f0).collect();
        let lo = f0.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = f0.iter().copied().fold(0.0, f64::max);
        println!("{name:<15} {:>3} clips, peak <= {peak:.3}, f0 in [{lo:.0}, {hi:.0}] Hz", clips.len());
    }
    if let Some(dir) = std::env::args().nth(1) {
        let manifest = corpus.export_wav(std::path::Path::new(&dir))?;
        println!("wrote {}", manifest.display());
    }
    Ok(())
}
