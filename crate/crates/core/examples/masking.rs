//! Structured and unstructured masks on the desk patch grid, drawn as text,
//! plus the visible-token budget and attention cost.

use audiomosaic::patch::{attention_cost, mask_view, MaskMode, MaskSpec, PatchGrid};
use audiomosaic::pipeline::Frontend;
use audiomosaic::corpus::{synth_clip, SynthClass, SynthSpec};
use audiomosaic::dsp::MelConfig;

fn draw(grid: &PatchGrid, coords: &[(usize, usize)]) {
    let (tp, fp) = grid.grid();
    for f in (0..fp).rev() {
        let row: String = (0..tp).map(|t| if coords.contains(&(t, f)) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> Result<(), audiomosaic::Error> {
    let cfg = MelConfig {
        target_frames: 112,
        ..MelConfig::default()
    };
    let fe = Frontend::new(&cfg, (16, 16), (-8.0, 5.0))?;
    let (clip, _) = synth_clip(SynthClass::LinearChirp, &SynthSpec::default(), 1);
    let grid = fe.grid(&clip)?;
    let base = MaskSpec::default();
    let matched = base.matched_unstructured(grid.grid());
    for spec in [base.clone(), matched, base.with_mode(MaskMode::Time), base.with_mode(MaskMode::Freq)] {
        let view = mask_view(&grid, &spec, 5)?;
        let n = view.visible_count();
        println!("{:<13} {n:>2} of {} tokens visible (time runs left to right)", spec.mode.name(), grid.len());
        draw(&grid, view.coords());
    }

    let full_grid = (64, 8);
    let visible = base.visible_count(full_grid);
    let frac = visible as f64 / (full_grid.0 * full_grid.1) as f64;
    let cost = attention_cost(full_grid.0 * full_grid.1, frac)?;
    println!("grid {full_grid:?}: {visible} visible ({:.1} %), attention cost ratio {:.3}", 100.0 * frac, cost.ratio);
    println!("half the tokens: ratio {:.2}", attention_cost(512, 0.5)?.ratio);
    Ok(())
}
