//! Waveform to token view: augmentation, log-Mel, padding, normalization,
//! patching, masking and shuffling, each stage seeded per item.

use crate::dsp::{augment_waveform, corpus_stats, AugmentConfig, MelConfig, MelExtractor, Spectrogram, Waveform};
use crate::patch::{mask_view, patchify, shuffle_tokens, MaskSpec, MaskedView, PatchGrid};
use crate::rng::{derive_seed, stage};
use crate::Error;

/// Log-Mel extraction plus the fixed-length, normalized layout the encoder
/// expects.
pub struct Frontend {
    mel: MelExtractor,
    patch: (usize, usize),
    mean: f64,
    std: f64,
}

impl Frontend {
    pub fn new(cfg: &MelConfig, patch: (usize, usize), norm: (f64, f64)) -> Result<Self, Error> {
        if !(norm.1 > 0.0 && norm.0.is_finite()) {
            return Err(Error::Invalid(format!("normalization stats {norm:?} invalid")));
        }
        Ok(Self {
            mel: MelExtractor::new(cfg)?,
            patch,
            mean: norm.0,
            std: norm.1,
        })
    }

    pub fn config(&self) -> &MelConfig {
        self.mel.config()
    }

    pub fn norm(&self) -> (f64, f64) {
        (self.mean, self.std)
    }

    /// Raw log-Mel with no padding or normalization.
    pub fn raw(&self, w: &Waveform) -> Result<Spectrogram, Error> {
        Ok(self.mel.compute(w)?)
    }

    /// Padded or trimmed to `target_frames` with silence, then normalized.
    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram, Error> {
        let cfg = self.mel.config();
        let raw = self.mel.compute(w)?;
        Ok(raw
            .pad_or_trim(cfg.target_frames, cfg.silence_level() as f32)
            .normalize(self.mean, self.std))
    }

    pub fn grid(&self, w: &Waveform) -> Result<PatchGrid, Error> {
        Ok(patchify(&self.spectrogram(w)?, self.patch.0, self.patch.1)?)
    }

    /// Normalized value of an all-silent bin.
    pub fn silence(&self) -> f32 {
        let raw = self.mel.config().silence_level() as f32;
        ((raw as f64 - self.mean) * (1.0 / (2.0 * self.std))) as f32
    }
}

/// Mean and standard deviation of the raw log-Mel entries of `clips`.
pub fn norm_stats<'a>(cfg: &MelConfig, clips: impl Iterator<Item = &'a Waveform>) -> Result<(f64, f64), Error> {
    let mel = MelExtractor::new(cfg)?;
    let specs = clips.map(|w| mel.compute(w)).collect::<Result<Vec<_>, _>>()?;
    if specs.is_empty() {
        return Err(Error::Invalid("cannot compute normalization over zero clips".into()));
    }
    let (mean, std) = corpus_stats(specs.iter());
    Ok((mean, if std > 0.0 { std } else { 1.0 }))
}

/// Identifies one view of one item for seed derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewKey {
    pub epoch: u64,
    pub item: u64,
    pub view: u64,
}

impl ViewKey {
    pub fn seed(&self, master: u64, stage_id: u64) -> u64 {
        derive_seed(master, &[self.epoch, self.item, self.view, stage_id])
    }
}

/// Augment, extract, mask and shuffle one view.
pub fn make_view(
    fe: &Frontend,
    w: &Waveform,
    augment: &AugmentConfig,
    mask: &MaskSpec,
    master: u64,
    key: ViewKey,
) -> Result<MaskedView, Error> {
    let aug = augment_waveform(w, augment, key.seed(master, stage::AUGMENT));
    let grid = fe.grid(&aug)?;
    let view = mask_view(&grid, mask, key.seed(master, stage::MASK))?;
    Ok(shuffle_tokens(&view, key.seed(master, stage::SHUFFLE)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::MaskMode;

    fn tone() -> Waveform {
        Waveform::new((0..16000).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect(), 16000).unwrap()
    }

    #[test]
    fn desk_layout() {
        let cfg = MelConfig {
            target_frames: 112,
            ..MelConfig::default()
        };
        let fe = Frontend::new(&cfg, (16, 16), (-4.0, 3.0)).unwrap();
        let s = fe.spectrogram(&tone()).unwrap();
        assert_eq!((s.frames(), s.bins()), (112, 128));
        assert!(s.frame(111).iter().all(|&v| v == fe.silence()));
        assert_eq!(fe.grid(&tone()).unwrap().grid(), (7, 8));
    }

    #[test]
    fn views_are_seeded() {
        let cfg = MelConfig {
            target_frames: 112,
            ..MelConfig::default()
        };
        let fe = Frontend::new(&cfg, (16, 16), (-4.0, 3.0)).unwrap();
        let key = ViewKey {
            epoch: 0,
            item: 3,
            view: 0,
        };
        let aug = AugmentConfig::default();
        let mask = MaskSpec::default();
        let a = make_view(&fe, &tone(), &aug, &mask, 1, key).unwrap();
        let b = make_view(&fe, &tone(), &aug, &mask, 1, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.visible_count(), 15);
        let c = make_view(&fe, &tone(), &aug, &mask, 1, ViewKey { view: 1, ..key }).unwrap();
        assert_ne!(a, c);
        let full = make_view(&fe, &tone(), &AugmentConfig::none(), &mask.with_mode(MaskMode::None), 1, key).unwrap();
        assert_eq!(full.visible_count(), 56);
    }

    #[test]
    fn norm_stats_of_constant_corpus() {
        let cfg = MelConfig::default();
        let silent = Waveform::new(vec![0.0; 1600], 16000).unwrap();
        let (m, s) = norm_stats(&cfg, std::iter::once(&silent)).unwrap();
        assert!((m - (1e-10f64).ln()).abs() < 1e-4);
        assert_eq!(s, 1.0);
    }
}
