//! Two augmented views of one clip and the stages that fired for each.

use audiomosaic::corpus::{synth_clip, SynthClass, SynthSpec};
use audiomosaic::dsp::{augment_with_trace, AugmentConfig};
use audiomosaic::pipeline::ViewKey;
use audiomosaic::rng::stage;

fn main() {
    let (clip, _) = synth_clip(SynthClass::HarmonicStack, &SynthSpec::default(), 3);
    let cfg = AugmentConfig::default();
    for view in 0..2 {
        let key = ViewKey { epoch: 0, item: 0, view };
        let (aug, trace) = augment_with_trace(&clip, &cfg, key.seed(42, stage::AUGMENT));
        println!("view {view}: {} samples, power {:.4} (clean {:.4})", aug.len(), aug.power(), clip.power());
        for (name, value) in &trace.fired {
            println!("  {name:<16} {value:.3}");
        }
    }
}
