//! AdamW with decoupled weight decay and the learning-rate schedules.

use crate::config::{OptimConfig, ScheduleMode};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&OptimConfig> for AdamConfig {
    fn from(o: &OptimConfig) -> Self {
        Self {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }
}

/// First and second moments for every parameter of one store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update. `grads[i]` belongs to the `i`-th parameter of `store`;
/// parameters without a gradient are frozen and left untouched, moments
/// included.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<&[T]>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TrainError::Optimizer(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (p, g) in store.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.len() {
                return Err(TrainError::Optimizer(format!(
                    "gradient for {} has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.as_f64().is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                    index: i,
                });
            }
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = g[j].as_f64();
            let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * g;
            let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let mut x = w.as_f64();
            x -= decay * x;
            x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
            *w = T::of(x);
        }
    }
    Ok(())
}

/// Learning-rate schedule; epochs may be fractional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn fixed(base_lr: f64) -> Self {
        Self {
            mode: ScheduleMode::Fixed,
            base_lr,
            warmup_epochs: 0.0,
            total_epochs: 1.0,
            min_lr: base_lr,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.total_epochs) {
            return Err(TrainError::Optimizer(format!(
                "warm-up of {} epochs exceeds the {} scheduled epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(TrainError::Optimizer("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at zero-based `step`. Under `warmup_cosine` the rate ramps
/// linearly from 0 and reaches `base_lr` at the first post-warm-up step, then
/// follows a half cosine that lands on `min_lr` at the final step.
pub fn lr_at(step: usize, sched: &ScheduleConfig, steps_per_epoch: usize) -> f64 {
    match sched.mode {
        ScheduleMode::Fixed => sched.base_lr,
        ScheduleMode::WarmupCosine => {
            let spe = steps_per_epoch.max(1) as f64;
            let warmup = (sched.warmup_epochs * spe).round() as usize;
            let total = ((sched.total_epochs * spe).round() as usize).max(1);
            let last = total - 1;
            if step >= last {
                sched.min_lr
            } else if step < warmup {
                sched.base_lr * step as f64 / warmup as f64
            } else if step == warmup {
                sched.base_lr
            } else {
                let progress = (step - warmup) as f64 / (last - warmup) as f64;
                sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(x), decay);
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(1.5, true);
        let mut st = OptimState::new(
            &s,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..3 {
            adamw_step(&mut s, &[Some(&[0.0])], &mut st, 1e-2).unwrap();
        }
        assert_eq!(s.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.25, false);
        let mut st = OptimState::new(&s, AdamConfig::default());
        adamw_step(&mut s, &[Some(&[1.0])], &mut st, 6e-4).unwrap();
        let moved = 0.25 - s.get("w").unwrap().item();
        assert!((moved - 6e-4).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn quadratic_trace_matches_hand_rolled_adamw() {
        // minimise (w - 3)^2 from w = 0
        let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 0.01);
        let mut s = scalar_store(0.0, true);
        let mut st = OptimState::new(
            &s,
            AdamConfig {
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: wd,
            },
        );
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (s.get("w").unwrap().item() - 3.0);
            adamw_step(&mut s, &[Some(&[g])], &mut st, lr).unwrap();

            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w *= 1.0 - lr * wd;
            w -= lr * mh / (vh.sqrt() + eps);
            assert!((s.get("w").unwrap().item() - w).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn decay_exempt_params_are_bitwise_unchanged() {
        let mut s = ParamStore::<f32>::new();
        s.add("lin.weight", Tensor::full(&[2, 2], 0.7), true);
        s.add("norm.weight", Tensor::full(&[2], 1.3), false);
        s.add("lin.bias", Tensor::full(&[2], -0.2), false);
        let before = s.clone();
        let mut st = OptimState::new(
            &s,
            AdamConfig {
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
        );
        let z4 = [0.0f32; 4];
        let z2 = [0.0f32; 2];
        adamw_step(&mut s, &[Some(&z4), Some(&z2), Some(&z2)], &mut st, 0.1).unwrap();
        assert_eq!(s.get("norm.weight").unwrap(), before.get("norm.weight").unwrap());
        assert_eq!(s.get("lin.bias").unwrap(), before.get("lin.bias").unwrap());
        assert!(s.get("lin.weight").unwrap().data()[0] < 0.7);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0, true);
        let mut st = OptimState::new(&s, AdamConfig::default());
        let err = adamw_step(&mut s, &[Some(&[f64::NAN])], &mut st, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = scalar_store(2.0, true);
        let mut st = OptimState::new(&s, AdamConfig::default());
        adamw_step(&mut s, &[None], &mut st, 1.0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0);
        assert_eq!(st.m[0].item(), 0.0);
    }

    #[test]
    fn schedules() {
        let fixed = ScheduleConfig::fixed(6e-4);
        for step in [0, 7, 1999] {
            assert_eq!(lr_at(step, &fixed, 6), 6e-4);
        }
        let cos = ScheduleConfig {
            mode: ScheduleMode::WarmupCosine,
            base_lr: 1e-3,
            warmup_epochs: 2.0,
            total_epochs: 10.0,
            min_lr: 1e-6,
        };
        cos.validate().unwrap();
        assert_eq!(lr_at(0, &cos, 5), 0.0);
        assert_eq!(lr_at(10, &cos, 5), 1e-3);
        assert!((lr_at(49, &cos, 5) - 1e-6).abs() < 1e-12);
        assert!((lr_at(5, &cos, 5) - 5e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in 10..50 {
            let lr = lr_at(step, &cos, 5);
            assert!(lr <= prev && lr >= 1e-6);
            prev = lr;
        }
        let bad = ScheduleConfig {
            warmup_epochs: 11.0,
            ..cos
        };
        assert!(bad.validate().is_err());
    }
}
