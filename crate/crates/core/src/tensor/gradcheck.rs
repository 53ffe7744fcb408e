use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(input index, coordinate)` with the largest error.
    pub worst: (usize, usize),
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn max_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Analytic and central-difference gradients of `f` at `points`, one
/// `(analytic, numeric)` pair per coordinate, grouped by point.
///
/// `f` builds a scalar loss on a fresh tape from one leaf per point. Every
/// coordinate of every point is perturbed, so keep inputs small.
pub fn gradient_pairs<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<(f64, f64)>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(&tape, *var);
        let mut pairs = Vec::with_capacity(points[pi].len());
        for c in 0..points[pi].len() {
            let orig = points[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            pairs.push((analytic.data()[c], (up - down) / (2.0 * eps)));
        }
        out.push(pairs);
    }
    Ok(out)
}

/// Checks `f` at `points` by central differences with step `eps`.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: (0, 0),
    };
    for (pi, pairs) in gradient_pairs(f, points, eps)?.iter().enumerate() {
        for (c, &(a, n)) in pairs.iter().enumerate() {
            let err = max_rel_error(a, n);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
