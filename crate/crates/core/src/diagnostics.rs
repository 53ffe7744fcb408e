//! Effective rank of a batch of representations and the comparison of
//! inference-time masking modes.
//!
//! Singular values come from the eigenvalues of the smaller Gram matrix,
//! found with cyclic Jacobi rotations. The effective rank is the exponential
//! of the Shannon entropy of the normalized singular values.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::Waveform;
use crate::model::{EncoderConfig, ParamStore};
use crate::patch::{mask_view, patchify, MaskMode, MaskSpec, MaskedView};
use crate::pipeline::Frontend;
use crate::probe::{features_of_views, Layers};
use crate::rng::{derive_seed, stage};

/// Smallest batch accepted by [`erank_report`].
pub const MIN_REPORT_CLIPS: usize = 64;
/// Jacobi sweeps stop once the off-diagonal Frobenius norm falls below this
/// fraction of the matrix norm.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("matrix has {rows}x{cols} entries but {len} values were given")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("rank analysis needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("all-zero matrix has no singular spectrum")]
    Zero,
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("{got} clips supplied, at least {need} needed")]
    TooFewClips { got: usize, need: usize },
}

/// `B x d` representations, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Free-form provenance such as `time_freq/last`.
    pub source: String,
}

impl EmbeddingBatch {
    pub fn new(z: Vec<f64>, rows: usize, cols: usize, source: impl Into<String>) -> Result<Self, DiagnosticsError> {
        if z.len() != rows * cols || cols == 0 {
            return Err(DiagnosticsError::Shape { rows, cols, len: z.len() });
        }
        if rows < 2 {
            return Err(DiagnosticsError::TooFewRows(rows));
        }
        if let Some(i) = z.iter().position(|x| !x.is_finite()) {
            return Err(DiagnosticsError::NonFinite(i));
        }
        Ok(Self {
            z,
            rows,
            cols,
            source: source.into(),
        })
    }

    /// Copy with every column shifted to zero mean.
    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.cols {
            let mean = (0..self.rows).map(|r| self.z[r * self.cols + c]).sum::<f64>() / self.rows as f64;
            for r in 0..self.rows {
                out.z[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingularSpectrum {
    /// Non-increasing, `min(B, d)` values.
    pub sigma: Vec<f64>,
    /// `sigma / sum(sigma)`.
    pub p: Vec<f64>,
    pub erank: f64,
}

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let mut a = a.to_vec();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > JACOBI_TOL * norm {
        if sweeps == MAX_SWEEPS {
            return Err(DiagnosticsError::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * n + i]).collect())
}

/// Singular values of `batch` via the smaller Gram matrix. Eigenvalues below
/// `n * eps * lambda_max` are round-off and count as zero.
pub fn singular_values(batch: &EmbeddingBatch) -> Result<SingularSpectrum, DiagnosticsError> {
    let (b, d, z) = (batch.rows, batch.cols, &batch.z);
    if z.iter().all(|&x| x == 0.0) {
        return Err(DiagnosticsError::Zero);
    }
    let (n, gram) = if d <= b {
        let mut g = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v: f64 = (0..b).map(|r| z[r * d + i] * z[r * d + j]).sum();
                g[i * d + j] = v;
                g[j * d + i] = v;
            }
        }
        (d, g)
    } else {
        let mut g = vec![0.0; b * b];
        for i in 0..b {
            for j in i..b {
                let v: f64 = (0..d).map(|c| z[i * d + c] * z[j * d + c]).sum();
                g[i * b + j] = v;
                g[j * b + i] = v;
            }
        }
        (b, g)
    };
    let eig = jacobi_eigenvalues(&gram, n)?;
    let floor = n as f64 * f64::EPSILON * eig.iter().fold(0.0f64, |m, &l| m.max(l));
    let mut sigma: Vec<f64> = eig.into_iter().map(|l| if l > floor { l.sqrt() } else { 0.0 }).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(spectrum(sigma))
}

/// Normalizes `sigma` (sorted descending) and attaches its effective rank.
pub fn spectrum(sigma: Vec<f64>) -> SingularSpectrum {
    let total: f64 = sigma.iter().sum();
    let p: Vec<f64> = sigma.iter().map(|s| s / total).collect();
    let mut s = SingularSpectrum { sigma, p, erank: 0.0 };
    s.erank = effective_rank(&s);
    s
}

/// `exp(-sum p log p)` with `0 log 0 = 0`.
pub fn effective_rank(spec: &SingularSpectrum) -> f64 {
    let total: f64 = spec.sigma.iter().sum();
    let h: f64 = spec
        .sigma
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// One row of the masking-mode comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ErankRow {
    pub mode: MaskMode,
    pub b: usize,
    pub d: usize,
    pub erank: f64,
    pub sigma: Vec<f64>,
}

/// Pooled last-layer representations of `clips` under inference-time masking
/// `mode`; masks are drawn from seeds independent of training.
pub fn masked_embeddings(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    fe: &Frontend,
    clips: &[Waveform],
    mask: &MaskSpec,
    mode: MaskMode,
    seed: u64,
    sequential: bool,
) -> Result<EmbeddingBatch, crate::Error> {
    let spec = mask.with_mode(mode);
    let view = |(i, w): (usize, &Waveform)| -> Result<MaskedView, crate::Error> {
        let grid = patchify(&fe.spectrogram(w)?, enc.patch.0, enc.patch.1)?;
        let s = derive_seed(seed, &[0, i as u64, 0, stage::INFERENCE_MASK]);
        Ok(mask_view(&grid, &spec, s)?)
    };
    let views: Vec<MaskedView> = if sequential {
        clips.iter().enumerate().map(view).collect::<Result<_, _>>()?
    } else {
        clips.par_iter().enumerate().map(view).collect::<Result<_, _>>()?
    };
    let feats = features_of_views(store, enc, &views, Layers::Last, sequential)?;
    let z = feats.into_iter().next().expect("last layer").into_data();
    Ok(EmbeddingBatch::new(z, clips.len(), enc.dim, format!("{mode}/last"))?)
}

/// Effective rank of pooled representations under each inference-time
/// masking mode.
#[allow(clippy::too_many_arguments)]
pub fn erank_report(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    fe: &Frontend,
    clips: &[Waveform],
    mask: &MaskSpec,
    modes: &[MaskMode],
    seed: u64,
    sequential: bool,
    center: bool,
) -> Result<Vec<ErankRow>, crate::Error> {
    if clips.len() < MIN_REPORT_CLIPS {
        return Err(DiagnosticsError::TooFewClips {
            got: clips.len(),
            need: MIN_REPORT_CLIPS,
        }
        .into());
    }
    let row = |&mode: &MaskMode| -> Result<ErankRow, crate::Error> {
        let mut z = masked_embeddings(store, enc, fe, clips, mask, mode, seed, sequential)?;
        if center {
            z = z.centered();
        }
        let s = singular_values(&z)?;
        Ok(ErankRow {
            mode,
            b: z.rows,
            d: z.cols,
            erank: s.erank,
            sigma: s.sigma,
        })
    };
    if sequential {
        modes.iter().map(row).collect()
    } else {
        modes.par_iter().map(row).collect()
    }
}

/// `mode,B,d,erank,sigma_1..sigma_Q`.
pub fn write_erank_csv(path: impl AsRef<Path>, rows: &[ErankRow]) -> Result<(), crate::Error> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| crate::Error::Failed(format!("writing {}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    let q = rows.iter().map(|r| r.sigma.len()).max().unwrap_or(0);
    let mut header = vec!["mode".to_string(), "B".into(), "d".into(), "erank".into()];
    header.extend((1..=q).map(|k| format!("sigma_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.mode.name().to_string(), r.b.to_string(), r.d.to_string(), format!("{:.9}", r.erank)];
        rec.extend(r.sigma.iter().map(|s| format!("{s:.9e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(crate::Error::io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn batch(rows: usize, cols: usize, z: Vec<f64>) -> EmbeddingBatch {
        EmbeddingBatch::new(z, rows, cols, "test").unwrap()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = rng_from(seed);
        batch(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn identity(n: usize) -> EmbeddingBatch {
        batch(n, n, (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect())
    }

    /// Eigenvalues of the `d x d` Gram matrix from nalgebra's symmetric solver.
    fn oracle_sigma(b: &EmbeddingBatch) -> Vec<f64> {
        let z = DMatrix::from_row_slice(b.rows, b.cols, &b.z);
        let g = z.transpose() * &z;
        let mut s: Vec<f64> = g.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    #[test]
    fn identity_has_full_rank() {
        for n in [2, 4, 8, 64] {
            let s = singular_values(&identity(n)).unwrap();
            assert!(s.sigma.iter().all(|&x| (x - 1.0).abs() < 1e-12));
            assert!((s.erank - n as f64).abs() < 1e-9, "{n}: {}", s.erank);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let z: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let s = singular_values(&batch(4, 3, z)).unwrap();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((s.sigma[0] - norm(&u) * norm(&v)).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x < 1e-10));
        assert!((s.erank - 1.0).abs() < 1e-9, "{}", s.erank);
    }

    #[test]
    fn closed_form_entropy() {
        let s = spectrum(vec![2.0, 1.0, 1.0]);
        assert_eq!(s.p, vec![0.5, 0.25, 0.25]);
        assert!((s.erank - 2f64.powf(1.5)).abs() < 1e-9);
        assert!((s.erank - 2.8284).abs() < 1e-4);
        let s = spectrum(vec![5.0, 0.0]);
        assert_eq!(s.erank, 1.0);
        for n in [1usize, 3, 10] {
            assert!((spectrum(vec![0.7; n]).erank - n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn random_matrix_matches_gram_eigen_oracle() {
        for seed in 0..5 {
            let b = gaussian(64, 16, seed);
            let s = singular_values(&b).unwrap();
            for (x, y) in s.sigma.iter().zip(oracle_sigma(&b)) {
                assert!((x - y).abs() <= 1e-8 * y, "{x} vs {y}");
            }
            let wide = gaussian(8, 20, seed + 10);
            let svd = DMatrix::from_row_slice(8, 20, &wide.z).svd(false, false).singular_values;
            let mut want: Vec<f64> = svd.iter().copied().collect();
            want.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in singular_values(&wide).unwrap().sigma.iter().zip(want) {
                assert!((x - y).abs() <= 1e-8 * y);
            }
        }
    }

    #[test]
    fn collapsed_embeddings_have_rank_near_one() {
        let mut rng = rng_from(3);
        let c: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..128 * 32).map(|i| c[i % 32] + 1e-8 * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = singular_values(&batch(128, 32, z)).unwrap();
        assert!(s.erank < 1.1, "{}", s.erank);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(singular_values(&batch(3, 2, vec![0.0; 6])), Err(DiagnosticsError::Zero)));
        assert!(EmbeddingBatch::new(vec![1.0; 2], 1, 2, "").is_err());
        assert!(EmbeddingBatch::new(vec![1.0, f64::NAN, 0.0, 1.0], 2, 2, "").is_err());
        assert!(EmbeddingBatch::new(vec![1.0; 5], 2, 2, "").is_err());
    }

    #[test]
    fn centering_removes_a_shared_offset() {
        let b = gaussian(40, 6, 7);
        let shifted = batch(40, 6, b.z.iter().enumerate().map(|(i, x)| x + 10.0 * (i % 6) as f64).collect());
        let a = singular_values(&b.centered()).unwrap().erank;
        let c = singular_values(&shifted.centered()).unwrap().erank;
        assert!((a - c).abs() < 1e-9);
        assert!(singular_values(&shifted).unwrap().erank < a);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn erank_bounds_and_invariances(seed in 0u64..1000, rows in 2usize..24, cols in 1usize..12, c in 0.01f64..100.0) {
            let b = gaussian(rows, cols, seed);
            let s = singular_values(&b).unwrap();
            let q = rows.min(cols) as f64;
            prop_assert!(s.erank >= 1.0 - 1e-12 && s.erank <= q + 1e-9);
            prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));

            let neg = if seed % 2 == 0 { -c } else { c };
            let scaled = batch(rows, cols, b.z.iter().map(|x| x * neg).collect());
            prop_assert!((singular_values(&scaled).unwrap().erank - s.erank).abs() < 1e-9);

            // random orthogonal R from the QR of a Gaussian matrix
            let mut rng = rng_from(seed + 1);
            let g: Vec<f64> = (0..cols * cols).map(|_| rng.sample(StandardNormal)).collect();
            let r = DMatrix::from_row_slice(cols, cols, &g).qr().q();
            let zr = DMatrix::from_row_slice(rows, cols, &b.z) * r;
            let rotated: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| zr[(i, j)]).collect();
            prop_assert!((singular_values(&batch(rows, cols, rotated)).unwrap().erank - s.erank).abs() < 1e-6);
        }
    }
}
