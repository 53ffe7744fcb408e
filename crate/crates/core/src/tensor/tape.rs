use super::kernels::{axis_split, gemm, inverse_perm, permute};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<f64>,
        train: bool,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    L2Normalize {
        a: Var,
        axis: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::GatherRows { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Mean { a, .. }
            | Op::Sum { a }
            | Op::L2Normalize { a, .. }
            | Op::Pick { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x, *gamma];
                v.extend(beta.iter().copied());
                v
            }
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// `b` broadcasts onto `a` when it matches a trailing suffix of `a`'s shape.
fn bias_compatible(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[.., m, k] × [k, n]` (shared right operand) or `[.., m, k] × [.., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                gemm(
                    batch * m,
                    k,
                    n,
                    (av, k as isize, 1),
                    (bv, n as isize, 1),
                    &mut out,
                    false,
                );
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        (&av[i * m * k..], k as isize, 1),
                        (&bv[i * k * n..], n as isize, 1),
                        &mut out[i * m * n..],
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    /// Elementwise sum; `b` may also be a trailing-suffix bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !bias_compatible(&sa, &sb) {
            return Err(mismatch("add", &sa, &sb));
        }
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % period])
            .collect();
        let value = Tensor::new(&sa, data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product; `b` may also be a trailing-suffix factor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !bias_compatible(&sa, &sb) {
            return Err(mismatch("mul", &sa, &sb));
        }
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % period])
            .collect();
        let value = Tensor::new(&sa, data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x * c).collect())?;
        Ok(self.push(value, Op::Scale { a, c }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(invalid("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(mismatch("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute(self.value(a).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} exceeds {shape:?} on axis {axis}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { a, axis, start }))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("gather_rows", "needs rank >= 1"));
        }
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(invalid(
                "gather_rows",
                format!("index {bad} out of range for {shape:?}"),
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| f(x)).collect())?;
        Ok(self.push(value, op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(
            a,
            |x| {
                let x = x.as_f64();
                T::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            },
            Op::Gelu { a },
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(invalid("log", "non-positive input"));
        }
        self.map(a, |x| x.ln(), Op::Log { a })
    }

    fn softmax_impl(&self, a: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let shape = self.shape(a).to_vec();
        check_axis(if log { "log_softmax" } else { "softmax" }, &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let max = (0..n)
                    .map(|i| src[at(i)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..n).map(|i| (src[at(i)].as_f64() - max).exp()).sum();
                let lse = max + sum.ln();
                for i in 0..n {
                    let x = src[at(i)].as_f64();
                    out[at(i)] = T::of(if log {
                        x - lse
                    } else {
                        (x - max).exp() / sum
                    });
                }
            }
        }
        Tensor::new(&shape, out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_impl(a, axis, false)?;
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Log-softmax with the max-shift log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_impl(a, axis, true)?;
        Ok(self.push(value, Op::LogSoftmax { a, axis }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / c.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j].as_f64() - mean) * rs;
                xhat[r * c + j] = T::of(h);
                out[r * c + j] = T::of(h * g[j].as_f64() + b[j].as_f64());
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization of `x: [B, C]` over the batch axis using the
    /// batch's own (biased) statistics. `beta = None` is the bias-free form.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid("batch_norm", format!("expected [B, C], got {shape:?}")));
        }
        let (bsz, c) = (shape[0], shape[1]);
        if bsz < 2 {
            return Err(invalid("batch_norm", "training mode needs a batch of at least 2"));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..bsz {
            for j in 0..c {
                mean[j] += src[r * c + j].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= bsz as f64);
        for r in 0..bsz {
            for j in 0..c {
                var[j] += (src[r * c + j].as_f64() - mean[j]).powi(2);
            }
        }
        let var_unbiased = var.iter().map(|v| v / (bsz - 1) as f64).collect();
        var.iter_mut().for_each(|v| *v /= bsz as f64);
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased,
        };
        let v = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((v, stats))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, running_mean, running_var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid("batch_norm", format!("expected [B, C], got {shape:?}")));
        }
        let c = shape[1];
        let params: Vec<Var> = std::iter::once(gamma).chain(beta).collect();
        for p in params {
            if self.shape(p) != [c] {
                return Err(mismatch("batch_norm", &shape, self.shape(p)));
            }
        }
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", &shape, &[mean.len()]));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = beta.map(|b| self.value(b).data());
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for (i, &v) in src.iter().enumerate() {
            let j = i % c;
            let h = (v.as_f64() - mean[j]) * rstd[j];
            xhat[i] = T::of(h);
            let shift = b.map_or(0.0, |b| b[j].as_f64());
            out[i] = T::of(h * g[j].as_f64() + shift);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("mean", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(invalid("mean", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let s: f64 = (0..n)
                    .map(|i| src[o * n * inner + i * inner + j].as_f64())
                    .sum();
                out.push(T::of(s / n as f64));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Mean { a, axis }))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum { a }))
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("l2_normalize", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let norm = (0..n)
                    .map(|i| src[at(i)].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d = norm.max(eps);
                for i in 0..n {
                    out[at(i)] = T::of(src[at(i)].as_f64() / d);
                }
                norms.push(norm);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::L2Normalize {
                a,
                axis,
                norms,
                eps,
            },
        ))
    }

    /// `[R, C] -> [R]`, taking entry `idx[r]` from row `r`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(mismatch("pick", &shape, &[idx.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(invalid("pick", format!("index {bad} out of range for {c} columns")));
        }
        let src = self.value(a).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| src[r * c + i])
            .collect();
        let value = Tensor::new(&[idx.len()], data)?;
        Ok(self.push(
            value,
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of `logits` against constant `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape != targets.shape() {
            return Err(mismatch("bce_with_logits", &shape, targets.shape()));
        }
        let x = self.value(logits).data();
        let n = x.len().max(1);
        let total: f64 = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| {
                let (x, y) = (x.as_f64(), y.as_f64());
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = slot(grads, nodes, *a);
                    if *shared_b {
                        gemm(
                            batch * m,
                            n,
                            k,
                            (g, n as isize, 1),
                            (bv, 1, n as isize),
                            da,
                            true,
                        );
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                (&g[i * m * n..], n as isize, 1),
                                (&bv[i * k * n..], 1, n as isize),
                                &mut da[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    if *shared_b {
                        gemm(
                            k,
                            batch * m,
                            n,
                            (av, 1, k as isize),
                            (g, n as isize, 1),
                            db,
                            true,
                        );
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                (&av[i * m * k..], 1, k as isize),
                                (&g[i * m * n..], n as isize, 1),
                                &mut db[i * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
                if wants(*b) {
                    let period = val(*b).len();
                    let mut acc = vec![0.0f64; period];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % period] += gi.as_f64();
                    }
                    slot(grads, nodes, *b)
                        .iter_mut()
                        .zip(acc)
                        .for_each(|(d, s)| *d = *d + T::of(s));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let period = bv.len();
                if wants(*a) {
                    slot(grads, nodes, *a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d = *d + g[i] * bv[i % period]);
                }
                if wants(*b) {
                    let mut acc = vec![0.0f64; period];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % period] += gi.as_f64() * av[i].as_f64();
                    }
                    slot(grads, nodes, *b)
                        .iter_mut()
                        .zip(acc)
                        .for_each(|(d, s)| *d = *d + T::of(s));
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
                }
            }
            Op::Permute { a, perm } => {
                if wants(*a) {
                    let back = permute(g, node.value.shape(), &inverse_perm(perm));
                    slot(grads, nodes, *a).iter_mut().zip(back).for_each(|(d, g)| *d = *d + g);
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if wants(*p) {
                        let d = slot(grads, nodes, *p);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..len * inner];
                            let dst = &mut d[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                if wants(*a) {
                    let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        let dst = &mut d[o * n * inner + start * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if wants(*a) {
                    let row = node.value.len() / idx.len().max(1);
                    let d = slot(grads, nodes, *a);
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut d[i * row..(i + 1) * row];
                        dst.iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                            .for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let x = val(*a);
                    slot(grads, nodes, *a).iter_mut().enumerate().for_each(|(i, d)| {
                        if x[i] > T::zero() {
                            *d = *d + g[i]
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let x = val(*a);
                    slot(grads, nodes, *a).iter_mut().enumerate().for_each(|(i, d)| {
                        let x = x[i].as_f64();
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        let dydx = 0.5 * (1.0 + t) + 0.5 * x * dt;
                        *d = *d + T::of(g[i].as_f64() * dydx);
                    });
                }
            }
            Op::Exp { a } => {
                if wants(*a) {
                    let y = node.value.data();
                    slot(grads, nodes, *a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d = *d + g[i] * y[i]);
                }
            }
            Op::Log { a } => {
                if wants(*a) {
                    let x = val(*a);
                    slot(grads, nodes, *a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d = *d + g[i] / x[i]);
                }
            }
            Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                if wants(*a) {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let y = node.value.data();
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            if log {
                                let gsum: f64 = (0..n).map(|i| g[at(i)].as_f64()).sum();
                                for i in 0..n {
                                    let p = y[at(i)].as_f64().exp();
                                    d[at(i)] = d[at(i)] + T::of(g[at(i)].as_f64() - p * gsum);
                                }
                            } else {
                                let dot: f64 = (0..n)
                                    .map(|i| g[at(i)].as_f64() * y[at(i)].as_f64())
                                    .sum();
                                for i in 0..n {
                                    let yi = y[at(i)].as_f64();
                                    d[at(i)] = d[at(i)] + T::of(yi * (g[at(i)].as_f64() - dot));
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                let gam = val(*gamma);
                if wants(*gamma) {
                    let mut acc = vec![0.0f64; c];
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        acc[i % c] += gi.as_f64() * h.as_f64();
                    }
                    slot(grads, nodes, *gamma)
                        .iter_mut()
                        .zip(acc)
                        .for_each(|(d, s)| *d = *d + T::of(s));
                }
                if wants(*beta) {
                    let mut acc = vec![0.0f64; c];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % c] += gi.as_f64();
                    }
                    slot(grads, nodes, *beta)
                        .iter_mut()
                        .zip(acc)
                        .for_each(|(d, s)| *d = *d + T::of(s));
                }
                if wants(*x) {
                    let d = slot(grads, nodes, *x);
                    let mut dh = vec![0.0f64; c];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let v = g[r * c + j].as_f64() * gam[j].as_f64();
                            dh[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * c + j].as_f64();
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let h = xhat[r * c + j].as_f64();
                            let dx = rstd[r] * (dh[j] - m1 - h * m2);
                            d[r * c + j] = d[r * c + j] + T::of(dx);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let c = node.value.shape()[1];
                let bsz = node.value.shape()[0];
                let gam = val(*gamma);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gh = vec![0.0f64; c];
                for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    sum_g[i % c] += gi.as_f64();
                    sum_gh[i % c] += gi.as_f64() * h.as_f64();
                }
                if wants(*gamma) {
                    slot(grads, nodes, *gamma)
                        .iter_mut()
                        .zip(&sum_gh)
                        .for_each(|(d, &s)| *d = *d + T::of(s));
                }
                if let Some(beta) = beta {
                    if wants(*beta) {
                        slot(grads, nodes, *beta)
                            .iter_mut()
                            .zip(&sum_g)
                            .for_each(|(d, &s)| *d = *d + T::of(s));
                    }
                }
                if wants(*x) {
                    let d = slot(grads, nodes, *x);
                    let nb = bsz as f64;
                    for (i, dv) in d.iter_mut().enumerate() {
                        let j = i % c;
                        let gamma_j = gam[j].as_f64();
                        let gi = g[i].as_f64();
                        let dx = if *train {
                            let h = xhat[i].as_f64();
                            gamma_j * rstd[j] * (gi - sum_g[j] / nb - h * sum_gh[j] / nb)
                        } else {
                            gamma_j * rstd[j] * gi
                        };
                        *dv = *dv + T::of(dx);
                    }
                }
            }
            Op::Mean { a, axis } => {
                if wants(*a) {
                    let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                    let scale = T::of(1.0 / n as f64);
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                let t = o * n * inner + i * inner + j;
                                d[t] = d[t] + g[o * inner + j] * scale;
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::L2Normalize {
                a,
                axis,
                norms,
                eps,
            } => {
                if wants(*a) {
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let y = node.value.data();
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            let norm = norms[o * inner + j];
                            if norm > *eps {
                                let dot: f64 = (0..n)
                                    .map(|i| g[at(i)].as_f64() * y[at(i)].as_f64())
                                    .sum();
                                for i in 0..n {
                                    let v = (g[at(i)].as_f64() - y[at(i)].as_f64() * dot) / norm;
                                    d[at(i)] = d[at(i)] + T::of(v);
                                }
                            } else {
                                for i in 0..n {
                                    d[at(i)] = d[at(i)] + T::of(g[at(i)].as_f64() / eps);
                                }
                            }
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if wants(*a) {
                    let c = nodes[a.0].value.shape()[1];
                    let d = slot(grads, nodes, *a);
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] = d[r * c + i] + g[r];
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if wants(*logits) {
                    let x = val(*logits);
                    let scale = g[0].as_f64() / x.len().max(1) as f64;
                    slot(grads, nodes, *logits).iter_mut().enumerate().for_each(|(i, d)| {
                        let s = 1.0 / (1.0 + (-x[i].as_f64()).exp());
                        *d = *d + T::of((s - targets[i].as_f64()) * scale);
                    });
                }
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when `v` did not
    /// contribute.
    pub fn tensor(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_two_samples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let (y, stats) = tape.batch_norm_train(x, g, None, 1e-5).unwrap();
        // (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var_unbiased, vec![2.0]);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(tape.batch_norm_train(x, g, None, 1e-5).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(3.0), true);
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates_and_unused_leaf_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[2], &[7.0, 7.0]), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
        assert!(g.get(unused).is_none());
        assert_eq!(g.tensor(&tape, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
    }

    #[test]
    fn batched_matmul_matches_loops() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64) - 4.0));
        let c = tape.matmul(a, b).unwrap();
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        let cv = tape.value(c).data();
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let want: f64 = (0..3)
                        .map(|p| av[bi * 6 + i * 3 + p] * bv[bi * 6 + p * 2 + j])
                        .sum();
                    assert_eq!(cv[bi * 4 + i * 2 + j], want);
                }
            }
        }
    }
}
