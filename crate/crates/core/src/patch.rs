//! Patch tokens, structured time/frequency masking and positional encodings.
//!
//! A spectrogram of `t × f` is cut into `p_t × p_f` blocks laid out row-major
//! over `(time_index, freq_index)`. Masking removes whole patch columns (time)
//! and patch rows (frequency); survivors keep their original grid coordinates
//! so positions can be attached after shuffling.

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::dsp::Spectrogram;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("{frames} x {bins} spectrogram is not divisible into {pt} x {pf} patches")]
    NotDivisible {
        frames: usize,
        bins: usize,
        pt: usize,
        pf: usize,
    },
    #[error("mask ratio {name} = {value} outside [0, 1)")]
    Ratio { name: &'static str, value: f64 },
    #[error("mask would remove every token")]
    AllMasked,
    #[error("positional dimension {0} is not a positive multiple of 4")]
    PosDim(usize),
    #[error("visible fraction {0} outside (0, 1]")]
    Fraction(f64),
}

/// Flattened patch tokens of one spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch: (usize, usize),
    grid: (usize, usize),
    tokens: Vec<f32>,
}

impl PatchGrid {
    /// `(T_p, F_p)`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch(&self) -> (usize, usize) {
        self.patch
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch.0 * self.patch.1
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let p = self.patch_len();
        &self.tokens[i * p..(i + 1) * p]
    }

    pub fn coord(&self, i: usize) -> (usize, usize) {
        (i / self.grid.1, i % self.grid.1)
    }

    /// Unmasked view with every token in grid order.
    pub fn full_view(&self) -> MaskedView {
        MaskedView {
            patch_len: self.patch_len(),
            tokens: self.tokens.clone(),
            coords: (0..self.len()).map(|i| self.coord(i)).collect(),
        }
    }
}

pub fn patchify(s: &Spectrogram, pt: usize, pf: usize) -> Result<PatchGrid, PatchError> {
    let (frames, bins) = (s.frames(), s.bins());
    if pt == 0 || pf == 0 || frames % pt != 0 || bins % pf != 0 || frames == 0 || bins == 0 {
        return Err(PatchError::NotDivisible {
            frames,
            bins,
            pt,
            pf,
        });
    }
    let (tp, fp) = (frames / pt, bins / pf);
    let mut tokens = Vec::with_capacity(frames * bins);
    for ti in 0..tp {
        for fi in 0..fp {
            for dt in 0..pt {
                let row = s.frame(ti * pt + dt);
                tokens.extend_from_slice(&row[fi * pf..(fi + 1) * pf]);
            }
        }
    }
    Ok(PatchGrid {
        patch: (pt, pf),
        grid: (tp, fp),
        tokens,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(g: &PatchGrid) -> Spectrogram {
    let ((pt, pf), (tp, fp)) = (g.patch, g.grid);
    let bins = fp * pf;
    let mut values = vec![0.0f32; tp * pt * bins];
    for i in 0..g.len() {
        let (ti, fi) = g.coord(i);
        for (k, &v) in g.token(i).iter().enumerate() {
            let (dt, df) = (k / pf, k % pf);
            values[(ti * pt + dt) * bins + fi * pf + df] = v;
        }
    }
    Spectrogram::new(tp * pt, bins, values).expect("grid dimensions")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Time,
    Freq,
    TimeFreq,
    Unstructured,
    None,
}

impl MaskMode {
    pub const ALL: [MaskMode; 5] = [
        MaskMode::Time,
        MaskMode::Freq,
        MaskMode::TimeFreq,
        MaskMode::Unstructured,
        MaskMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Time => "time",
            MaskMode::Freq => "freq",
            MaskMode::TimeFreq => "time_freq",
            MaskMode::Unstructured => "unstructured",
            MaskMode::None => "none",
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mask mode `{s}` (expected time, freq, time_freq, unstructured or none)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub rho_t: f64,
    pub rho_f: f64,
    pub rho_u: f64,
    /// Longest contiguous run per segment draw; `None` means `ceil(k / 2)`.
    pub max_segment: Option<usize>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mode: MaskMode::TimeFreq,
            rho_t: 0.6,
            rho_f: 0.4,
            rho_u: 0.75,
            max_segment: None,
        }
    }
}

/// `round(rho * n)` with ties to even.
pub fn mask_count(rho: f64, n: usize) -> usize {
    (rho * n as f64).round_ties_even() as usize
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            mode: MaskMode::None,
            ..Self::default()
        }
    }

    pub fn with_mode(&self, mode: MaskMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        for (name, value) in [("rho_t", self.rho_t), ("rho_f", self.rho_f), ("rho_u", self.rho_u)] {
            if !(0.0..1.0).contains(&value) {
                return Err(PatchError::Ratio { name, value });
            }
        }
        Ok(())
    }

    /// Number of surviving tokens on a `(tp, fp)` grid, independent of the seed.
    pub fn visible_count(&self, (tp, fp): (usize, usize)) -> usize {
        let n = tp * fp;
        match self.mode {
            MaskMode::None => n,
            MaskMode::Time => (tp - mask_count(self.rho_t, tp)) * fp,
            MaskMode::Freq => tp * (fp - mask_count(self.rho_f, fp)),
            MaskMode::TimeFreq => {
                (tp - mask_count(self.rho_t, tp)) * (fp - mask_count(self.rho_f, fp))
            }
            MaskMode::Unstructured => n - mask_count(self.rho_u, n),
        }
    }

    /// Unstructured spec whose visible count equals this spec's on `grid`.
    pub fn matched_unstructured(&self, grid: (usize, usize)) -> Self {
        let n = grid.0 * grid.1;
        let visible = self.visible_count(grid);
        Self {
            mode: MaskMode::Unstructured,
            rho_u: (n - visible) as f64 / n as f64,
            ..self.clone()
        }
    }
}

/// Surviving tokens with their original grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    patch_len: usize,
    tokens: Vec<f32>,
    coords: Vec<(usize, usize)>,
}

impl MaskedView {
    pub fn new(patch_len: usize, tokens: Vec<f32>, coords: Vec<(usize, usize)>) -> Self {
        assert_eq!(tokens.len(), patch_len * coords.len(), "token buffer size");
        Self {
            patch_len,
            tokens,
            coords,
        }
    }

    pub fn visible_count(&self) -> usize {
        self.coords.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }
}

/// Marks exactly `k` of `n` positions as a union of non-overlapping
/// contiguous segments with widths drawn from `[1, max_seg]`.
pub fn segment_mask(n: usize, k: usize, max_seg: usize, rng: &mut Rng) -> Vec<bool> {
    let mut marked = vec![false; n];
    let mut count = 0;
    let max_seg = max_seg.max(1);
    while count < k {
        let mut w = rng.gen_range(1..=max_seg).min(k - count);
        loop {
            let starts: Vec<usize> = (0..=n - w)
                .filter(|&s| marked[s..s + w].iter().all(|m| !m))
                .collect();
            if let Some(&s) = starts.get(rng.gen_range(0..starts.len().max(1))) {
                marked[s..s + w].iter_mut().for_each(|m| *m = true);
                count += w;
                break;
            }
            w -= 1;
        }
    }
    marked
}

fn draw_axis(n: usize, rho: f64, max_segment: Option<usize>, rng: &mut Rng) -> Vec<bool> {
    let k = mask_count(rho, n);
    let max_seg = max_segment.unwrap_or(k.div_ceil(2));
    segment_mask(n, k, max_seg, rng)
}

pub fn mask_view(g: &PatchGrid, spec: &MaskSpec, seed: u64) -> Result<MaskedView, PatchError> {
    spec.validate()?;
    let (tp, fp) = g.grid;
    if spec.visible_count(g.grid) == 0 {
        return Err(PatchError::AllMasked);
    }
    let mut rng = rng_from(seed);
    let keep: Vec<bool> = match spec.mode {
        MaskMode::None => vec![true; g.len()],
        MaskMode::Time | MaskMode::Freq | MaskMode::TimeFreq => {
            let use_t = spec.mode != MaskMode::Freq;
            let use_f = spec.mode != MaskMode::Time;
            let cols = if use_t {
                draw_axis(tp, spec.rho_t, spec.max_segment, &mut rng)
            } else {
                vec![false; tp]
            };
            let rows = if use_f {
                draw_axis(fp, spec.rho_f, spec.max_segment, &mut rng)
            } else {
                vec![false; fp]
            };
            (0..g.len())
                .map(|i| {
                    let (ti, fi) = g.coord(i);
                    !cols[ti] && !rows[fi]
                })
                .collect()
        }
        MaskMode::Unstructured => {
            let k = mask_count(spec.rho_u, g.len());
            let mut keep = vec![true; g.len()];
            for i in rand::seq::index::sample(&mut rng, g.len(), k) {
                keep[i] = false;
            }
            keep
        }
    };
    let p = g.patch_len();
    let mut tokens = Vec::new();
    let mut coords = Vec::new();
    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        tokens.extend_from_slice(&g.tokens[i * p..(i + 1) * p]);
        coords.push(g.coord(i));
    }
    Ok(MaskedView {
        patch_len: p,
        tokens,
        coords,
    })
}

/// Fisher–Yates permutation of `(token, coord)` pairs.
pub fn shuffle_tokens(v: &MaskedView, seed: u64) -> MaskedView {
    let mut order: Vec<usize> = (0..v.visible_count()).collect();
    order.shuffle(&mut rng_from(seed));
    let mut tokens = Vec::with_capacity(v.tokens.len());
    for &i in &order {
        tokens.extend_from_slice(v.token(i));
    }
    MaskedView {
        patch_len: v.patch_len,
        tokens,
        coords: order.iter().map(|&i| v.coords[i]).collect(),
    }
}

/// Fixed 2D sinusoidal encodings, `coords.len() × dim` row-major. The first
/// half of each row encodes the time index, the second half the frequency
/// index, each as interleaved `(sin, cos)` pairs.
pub fn pos_embed_2d(coords: &[(usize, usize)], dim: usize) -> Result<Vec<f64>, PatchError> {
    if dim == 0 || dim % 4 != 0 {
        return Err(PatchError::PosDim(dim));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 10000f64.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &(t, f) in coords {
        for pos in [t, f] {
            for w in &freqs {
                let phase = pos as f64 * w;
                out.push(phase.sin());
                out.push(phase.cos());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionCost {
    pub total_tokens: usize,
    pub visible_tokens: usize,
    /// Quadratic-term ratio, `visible_fraction²`.
    pub ratio: f64,
}

impl AttentionCost {
    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

pub fn attention_cost(total_tokens: usize, visible_fraction: f64) -> Result<AttentionCost, PatchError> {
    if !(visible_fraction > 0.0 && visible_fraction <= 1.0) {
        return Err(PatchError::Fraction(visible_fraction));
    }
    Ok(AttentionCost {
        total_tokens,
        visible_tokens: (visible_fraction * total_tokens as f64).round() as usize,
        ratio: visible_fraction * visible_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, HashMap};

    fn ramp_spec(frames: usize, bins: usize) -> Spectrogram {
        Spectrogram::new(frames, bins, (0..frames * bins).map(|i| i as f32).collect()).unwrap()
    }

    fn grid(tp: usize, fp: usize) -> PatchGrid {
        patchify(&ramp_spec(tp * 2, fp * 2), 2, 2).unwrap()
    }

    #[test]
    fn patch_grid_shapes() {
        let g = patchify(&ramp_spec(1024, 128), 16, 16).unwrap();
        assert_eq!((g.len(), g.grid()), (512, (64, 8)));
        let g = patchify(&ramp_spec(112, 128), 16, 16).unwrap();
        assert_eq!((g.len(), g.grid()), (56, (7, 8)));
        let s = ramp_spec(16, 16);
        let g = patchify(&s, 16, 16).unwrap();
        assert_eq!(g.tokens(), s.values());
        assert!(patchify(&ramp_spec(100, 128), 16, 16).is_err());
    }

    #[test]
    fn token_layout_is_time_major() {
        let s = ramp_spec(4, 6);
        let g = patchify(&s, 2, 3).unwrap();
        assert_eq!(g.grid(), (2, 2));
        assert_eq!(g.coord(1), (0, 1));
        // token (0, 1): frames 0..2, bins 3..6
        assert_eq!(g.token(1), &[3.0, 4.0, 5.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn headline_visible_count() {
        let g = patchify(&ramp_spec(1024, 128), 16, 16).unwrap();
        let v = mask_view(&g, &MaskSpec::default(), 7).unwrap();
        assert_eq!(v.visible_count(), 130);
        let cols: BTreeSet<usize> = v.coords().iter().map(|c| c.0).collect();
        let rows: BTreeSet<usize> = v.coords().iter().map(|c| c.1).collect();
        assert_eq!((cols.len(), rows.len()), (26, 5));
    }

    #[test]
    fn zero_ratios_keep_everything() {
        let g = grid(64, 8);
        let spec = MaskSpec {
            rho_t: 0.0,
            rho_f: 0.0,
            ..MaskSpec::default()
        };
        assert_eq!(mask_view(&g, &spec, 1).unwrap(), g.full_view());
    }

    #[test]
    fn everything_masked_is_an_error() {
        let g = grid(1, 1);
        let spec = MaskSpec {
            mode: MaskMode::Time,
            rho_t: 0.6,
            ..MaskSpec::default()
        };
        assert_eq!(mask_view(&g, &spec, 0), Err(PatchError::AllMasked));
        let bad = MaskSpec {
            rho_t: 1.0,
            ..MaskSpec::default()
        };
        assert!(matches!(mask_view(&g, &bad, 0), Err(PatchError::Ratio { .. })));
    }

    #[test]
    fn unstructured_survival_is_uniform() {
        let g = grid(64, 8);
        let spec = MaskSpec {
            mode: MaskMode::Unstructured,
            rho_u: 0.5,
            ..MaskSpec::default()
        };
        let mut hits = vec![0usize; 512];
        let runs = 10_000;
        for seed in 0..runs {
            let v = mask_view(&g, &spec, seed).unwrap();
            assert_eq!(v.visible_count(), 256);
            for &(t, f) in v.coords() {
                hits[t * 8 + f] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / runs as f64 - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn segments_respect_width_bound() {
        let mut rng = rng_from(3);
        for _ in 0..200 {
            let m = segment_mask(64, 38, 19, &mut rng);
            assert_eq!(m.iter().filter(|&&b| b).count(), 38);
        }
    }

    #[test]
    fn matched_unstructured_has_equal_budget() {
        let spec = MaskSpec::default();
        let u = spec.matched_unstructured((7, 8));
        assert_eq!(spec.visible_count((7, 8)), 15);
        assert_eq!(u.visible_count((7, 8)), 15);
        let g = grid(7, 8);
        assert_eq!(mask_view(&g, &u, 4).unwrap().visible_count(), 15);
    }

    #[test]
    fn pos_embed_properties() {
        let e = pos_embed_2d(&[(0, 0)], 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = pos_embed_2d(&[(3, 1), (3, 6)], 16).unwrap();
        assert_eq!(e[..8], e[16..24]);
        assert_ne!(e[8..16], e[24..32]);
        assert!(pos_embed_2d(&[(0, 0)], 6).is_err());
        let coords: Vec<(usize, usize)> = (0..64).flat_map(|t| (0..8).map(move |f| (t, f))).collect();
        let e = pos_embed_2d(&coords, 96).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..512 {
            for j in i + 1..512 {
                let d: f64 = (0..96).map(|k| (e[i * 96 + k] - e[j * 96 + k]).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn shuffle_is_uniform_over_permutations() {
        let g = grid(2, 2);
        let v = g.full_view();
        let one = MaskedView::new(4, g.token(0).to_vec(), vec![(0, 0)]);
        assert_eq!(shuffle_tokens(&one, 9), one);
        let mut counts: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
        let runs = 10_000;
        for seed in 0..runs {
            let s = shuffle_tokens(&v, seed);
            for i in 0..4 {
                let (t, f) = s.coords()[i];
                assert_eq!(s.token(i), g.token(t * 2 + f));
            }
            *counts.entry(s.coords().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        for c in counts.values() {
            assert!((*c as f64 / runs as f64 - 1.0 / 24.0).abs() < 0.01);
        }
    }

    #[test]
    fn attention_cost_values() {
        let c = attention_cost(512, 0.5).unwrap();
        assert_eq!(c.ratio, 0.25);
        assert_eq!(c.reduction(), 0.75);
        assert_eq!(c.visible_tokens, 256);
        assert_eq!(attention_cost(512, 1.0).unwrap().ratio, 1.0);
        let f = 130.0 / 512.0;
        assert!((attention_cost(512, f).unwrap().ratio - 0.0645).abs() < 1e-3);
        assert!(attention_cost(512, 0.0).is_err());
    }

    #[test]
    fn round_half_even_counts() {
        assert_eq!(mask_count(0.5, 5), 2);
        assert_eq!(mask_count(0.5, 7), 4);
        assert_eq!(mask_count(0.6, 64), 38);
        assert_eq!(mask_count(0.4, 8), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn structured_masks_remove_whole_lines(
            tp in 2usize..40, fp in 2usize..12,
            rho_t in 0.0f64..0.9, rho_f in 0.0f64..0.9,
            mode in prop::sample::select(vec![MaskMode::Time, MaskMode::Freq, MaskMode::TimeFreq]),
            seed in any::<u64>(),
        ) {
            let g = grid(tp, fp);
            let spec = MaskSpec { mode, rho_t, rho_f, ..MaskSpec::default() };
            match mask_view(&g, &spec, seed) {
                Err(PatchError::AllMasked) => prop_assert_eq!(spec.visible_count((tp, fp)), 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(v) => {
                    prop_assert_eq!(v.visible_count(), spec.visible_count((tp, fp)));
                    let cols: BTreeSet<usize> = v.coords().iter().map(|c| c.0).collect();
                    let rows: BTreeSet<usize> = v.coords().iter().map(|c| c.1).collect();
                    // every surviving column keeps every surviving row
                    prop_assert_eq!(cols.len() * rows.len(), v.visible_count());
                    let uniq: BTreeSet<_> = v.coords().iter().collect();
                    prop_assert_eq!(uniq.len(), v.visible_count());
                    for i in 0..v.visible_count() {
                        let (t, f) = v.coords()[i];
                        prop_assert_eq!(v.token(i), g.token(t * fp + f));
                    }
                    prop_assert_eq!(mask_view(&g, &spec, seed).unwrap(), v);
                }
            }
        }

        #[test]
        fn patchify_round_trip(tp in 1usize..8, fp in 1usize..8, pt in 1usize..5, pf in 1usize..5) {
            let s = ramp_spec(tp * pt, fp * pf);
            prop_assert_eq!(unpatchify(&patchify(&s, pt, pf).unwrap()), s);
        }
    }
}
