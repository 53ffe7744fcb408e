//! Symmetric InfoNCE over paired view embeddings, plus the supervised losses
//! used by probes and fine-tuning.

use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

/// `S[i, j] = <z_t[i], z_f[j]>` for unit-norm rows.
pub fn similarity_matrix<T: Real>(tape: &mut Tape<T>, zt: Var, zf: Var) -> Result<Var> {
    let (st, sf) = (tape.shape(zt).to_vec(), tape.shape(zf).to_vec());
    if st.len() != 2 || st != sf {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            left: st,
            right: sf,
        });
    }
    let ft = tape.transpose(zf)?;
    tape.matmul(zt, ft)
}

/// Mean of `-log softmax` at the matching partner over both directions.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, zt: Var, zf: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::Invalid {
            op: "info_nce",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let s = similarity_matrix(tape, zt, zf)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let b = tape.shape(s)[0];
    let diag: Vec<usize> = (0..b).collect();
    let mut total = None;
    for dir in [s, tape.transpose(s)?] {
        let ls = tape.log_softmax(dir, 1)?;
        let pos = tape.pick(ls, &diag)?;
        let sum = tape.sum(pos)?;
        total = Some(match total {
            None => sum,
            Some(t) => tape.add(t, sum)?,
        });
    }
    tape.scale(total.expect("two directions"), -1.0 / (2 * b) as f64)
}

/// Mean softmax cross-entropy of `[B, C]` logits against class indices.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(ls, labels)?;
    let sum = tape.sum(picked)?;
    tape.scale(sum, -1.0 / labels.len().max(1) as f64)
}

/// Mean binary cross-entropy against multi-hot targets.
pub fn bce_with_logits<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    tape.bce_with_logits(logits, targets)
}

/// Top-1 accuracy of `[B, C]` logits.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let best = (0..c)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::grad_check;
    use rand::Rng as _;

    fn unit_rows(b: usize, d: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..b {
            let n = v[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            v[r * d..(r + 1) * d].iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    fn loss(zt: &[f64], zf: &[f64], b: usize, d: usize, tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[b, d], zt).unwrap());
        let c = tape.constant(Tensor::from_f64(&[b, d], zf).unwrap());
        let l = info_nce(&mut tape, a, c, tau).unwrap();
        tape.value(l).item()
    }

    fn oracle(zt: &[f64], zf: &[f64], b: usize, d: usize, tau: f64) -> f64 {
        let sim = |i: usize, j: usize, x: &[f64], y: &[f64]| {
            (0..d).map(|k| x[i * d + k] * y[j * d + k]).sum::<f64>() / tau
        };
        let mut total = 0.0;
        for i in 0..b {
            let den: f64 = (0..b).map(|j| sim(i, j, zt, zf).exp()).sum();
            total -= (sim(i, i, zt, zf).exp() / den).ln();
            let den: f64 = (0..b).map(|j| sim(i, j, zf, zt).exp()).sum();
            total -= (sim(i, i, zf, zt).exp() / den).ln();
        }
        total / (2 * b) as f64
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(loss(&[0.6, 0.8], &[0.6, 0.8], 1, 2, 0.1), 0.0);
        let e = [1.0, 0.0, 0.0, 1.0];
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss(&e, &e, 2, 2, 1.0) - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = rng_from(2);
        for _ in 0..20 {
            let (zt, zf) = (unit_rows(8, 16, &mut rng), unit_rows(8, 16, &mut rng));
            assert!((loss(&zt, &zf, 8, 16, 0.1) - oracle(&zt, &zf, 8, 16, 0.1)).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_identity_and_bounds() {
        let e = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 3], &e).unwrap());
        let s = similarity_matrix(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
        let mut rng = rng_from(1);
        let (x, y) = (unit_rows(4, 8, &mut rng), unit_rows(4, 8, &mut rng));
        let a = tape.constant(Tensor::from_f64(&[4, 8], &x).unwrap());
        let b = tape.constant(Tensor::from_f64(&[4, 8], &y).unwrap());
        let s = similarity_matrix(&mut tape, a, b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want: f64 = (0..8).map(|k| x[i * 8 + k] * y[j * 8 + k]).sum();
                let got = tape.value(s).data()[i * 4 + j];
                assert!((got - want).abs() < 1e-12 && got.abs() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn invariances_and_monotonicity() {
        let mut rng = rng_from(5);
        let (b, d) = (6, 4);
        let (zt, zf) = (unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng));
        let base = loss(&zt, &zf, b, d, 0.2);
        let perm = [2, 0, 5, 1, 4, 3];
        let p = |z: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&r| z[r * d..(r + 1) * d].to_vec()).collect() };
        assert!((loss(&p(&zt), &p(&zf), b, d, 0.2) - base).abs() < 1e-12);
        // rotation in the (0, 1) plane
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |z: &[f64]| -> Vec<f64> {
            let mut o = z.to_vec();
            for r in 0..b {
                let (x, y) = (z[r * d], z[r * d + 1]);
                o[r * d] = c * x - s * y;
                o[r * d + 1] = s * x + c * y;
            }
            o
        };
        assert!((loss(&rot(&zt), &rot(&zf), b, d, 0.2) - base).abs() < 1e-12);
        // pulling a positive pair together with other similarities fixed
        let mut tape = Tape::<f64>::new();
        let mut sims = vec![0.1; b * b];
        let diag = [0.3; 6];
        let run = |tape: &mut Tape<f64>, sims: &[f64]| {
            let s = tape.constant(Tensor::from_f64(&[b, b], sims).unwrap());
            let ls = tape.log_softmax(s, 1).unwrap();
            let pk = tape.pick(ls, &(0..b).collect::<Vec<_>>()).unwrap();
            let sm = tape.sum(pk).unwrap();
            -tape.value(sm).item()
        };
        for i in 0..b {
            sims[i * b + i] = diag[i];
        }
        let before = run(&mut tape, &sims);
        sims[0] = 0.9;
        assert!(run(&mut tape, &sims) < before);
    }

    #[test]
    fn near_uniform_similarities_give_log_batch() {
        // random unit vectors in 2048 dimensions are nearly orthogonal
        let mut rng = rng_from(11);
        let (b, d) = (64, 2048);
        let (zt, zf) = (unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng));
        let l = loss(&zt, &zf, b, d, 0.1);
        assert!((3.0..=5.5).contains(&l), "{l}");
        assert!((l - (b as f64).ln()).abs() < 0.5, "{l}");
    }

    #[test]
    fn info_nce_gradients() {
        let mut rng = rng_from(9);
        let (zt, zf) = (unit_rows(4, 3, &mut rng), unit_rows(4, 3, &mut rng));
        let pts = [Tensor::from_f64(&[4, 3], &zt).unwrap(), Tensor::from_f64(&[4, 3], &zf).unwrap()];
        let r = grad_check(|t, v| info_nce(t, v[0], v[1], 0.5), &pts, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn supervised_losses() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 5]));
        let ce = cross_entropy(&mut tape, l, &[0, 4, 2]).unwrap();
        assert!((tape.value(ce).item() - 5f64.ln()).abs() < 1e-12);
        let bce = bce_with_logits(&mut tape, l, &Tensor::full(&[3, 5], 1.0)).unwrap();
        assert!((tape.value(bce).item() - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&mut tape, l, &[0, 5, 1]).is_err());
        let mut tape = Tape::<f64>::new();
        assert!(info_nce(&mut tape, l, l, 0.0).is_err());

        let mut rng = rng_from(4);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = [2usize, 0, 1];
        let l = tape.constant(Tensor::from_f64(&[3, 4], &x).unwrap());
        let ce = cross_entropy(&mut tape, l, &y).unwrap();
        let want: f64 = (0..3)
            .map(|r| {
                let row = &x[r * 4..r * 4 + 4];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y[r]].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(ce).item() - want).abs() < 1e-10);
        let t: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let bce = bce_with_logits(&mut tape, l, &Tensor::from_f64(&[3, 4], &t).unwrap()).unwrap();
        let want: f64 = x
            .iter()
            .zip(&t)
            .map(|(&v, &y)| {
                let p = 1.0 / (1.0 + (-v).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 12.0;
        assert!((tape.value(bce).item() - want).abs() < 1e-10);
    }

    #[test]
    fn accuracy_counts_argmax() {
        let l = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 2.0, 5.0, 1.0]).unwrap();
        assert!((accuracy(&l, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
