//! SGD with heavy-ball momentum and weight decay, the milestone learning-rate
//! schedule, and the warmup latch used for very deep networks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::nn::{EntryMut, Module};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub lr: f64,
    /// Warmup ends once the smoothed training error drops below this.
    pub exit_train_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptHyper {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by 10.
    pub milestones: Vec<u64>,
    #[serde(default)]
    pub warmup: Option<Warmup>,
    /// Apply weight decay to BN gamma/beta and the linear bias as well.
    #[serde(default = "default_true")]
    pub decay_all: bool,
}

fn default_true() -> bool {
    true
}

impl OptHyper {
    /// lr 0.1, momentum 0.9, decay 1e-4, divided by 10 at 32k and 48k.
    pub fn cifar() -> Self {
        OptHyper {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![32_000, 48_000],
            warmup: None,
            decay_all: true,
        }
    }

    /// The CIFAR recipe with a 0.01 warmup until training error is below 80%.
    pub fn cifar_with_warmup() -> Self {
        OptHyper {
            warmup: Some(Warmup {
                lr: 0.01,
                exit_train_error: 0.8,
            }),
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            )));
        }
        if self.base_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr must be positive and decay non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `iter`: the warmup rate while warmup is active, otherwise
/// `base_lr / 10^k` with `k` the number of milestones at or before `iter`.
pub fn lr_at(h: &OptHyper, iter: u64, warmup_active: bool) -> f64 {
    if warmup_active {
        if let Some(w) = h.warmup {
            return w.lr;
        }
    }
    let passed = h.milestones.iter().filter(|&&m| m <= iter).count();
    h.base_lr / 10f64.powi(passed as i32)
}

/// Per-parameter velocity, zero-initialized on first use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState<T: Element> {
    pub velocity: Vec<Tensor<T>>,
}

/// One heavy-ball step over aligned parameter and gradient lists:
/// `v <- momentum * v + grad + decay * param`, `param <- param - lr * v`.
///
/// `decay_mask[i]` selects whether parameter `i` receives weight decay.
pub fn sgd_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay_mask: &[bool],
    state: &mut OptState<T>,
    h: &OptHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay_mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay_mask.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| p.zeros_like()).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || state.velocity[i].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: params[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let (m, lr) = (T::of(h.momentum), T::of(lr));
    for ((p, g), (v, &decay)) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut().zip(decay_mask)) {
        let wd = T::of(if decay { h.weight_decay } else { 0.0 });
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

fn decays(name: &str, h: &OptHyper) -> bool {
    h.decay_all || !(name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias"))
}

/// Apply [`sgd_step`] to every trainable parameter of `module`, in visiting order.
pub fn step_module<T: Element, M: Module<T>>(
    module: &mut M,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    h: &OptHyper,
    lr: f64,
) -> Result<()> {
    let mut values = Vec::new();
    let mut g = Vec::new();
    let mut mask = Vec::new();
    module.visit_mut("", &mut |name, e| {
        if let EntryMut::Param(p) = e {
            g.push(grads.param(p));
            mask.push(decays(name, h));
            values.push(std::mem::replace(&mut p.value, Tensor::scalar(T::zero())));
        }
    });
    let mut refs: Vec<&mut Tensor<T>> = values.iter_mut().collect();
    let res = sgd_step(&mut refs, &g, &mask, state, h, lr);
    let mut it = values.into_iter();
    module.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            p.value = it.next().expect("parameter count changed during step");
        }
    });
    res
}

/// Mean of the most recent `capacity` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    capacity: usize,
    values: VecDeque<f64>,
}

impl RunningMean {
    pub fn new(capacity: usize) -> Self {
        RunningMean {
            capacity: capacity.max(1),
            values: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    /// Mean of the stored values; `None` before the first push.
    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Warmup on/off latch: active until the smoothed training error falls below
/// the exit threshold, then off for good.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupMonitor {
    active: bool,
    threshold: f64,
}

impl WarmupMonitor {
    pub fn new(warmup: Option<Warmup>) -> Self {
        match warmup {
            Some(w) => WarmupMonitor {
                active: true,
                threshold: w.exit_train_error,
            },
            None => WarmupMonitor {
                active: false,
                threshold: 0.0,
            },
        }
    }

    /// Restore a latch state (e.g. from a checkpoint).
    pub fn with_state(warmup: Option<Warmup>, active: bool) -> Self {
        WarmupMonitor {
            active: active && warmup.is_some(),
            ..Self::new(warmup)
        }
    }

    pub fn update(&mut self, train_error: f64) -> bool {
        if self.active && train_error < self.threshold {
            self.active = false;
        }
        self.active
    }

    pub fn active(&self) -> bool {
        self.active
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let h = OptHyper::cifar();
        assert_eq!(lr_at(&h, 0, false), 0.1);
        assert_eq!(lr_at(&h, 31_999, false), 0.1);
        assert!((lr_at(&h, 32_000, false) - 0.01).abs() < 1e-15);
        assert!((lr_at(&h, 48_000, false) - 0.001).abs() < 1e-15);
        let w = OptHyper::cifar_with_warmup();
        assert_eq!(lr_at(&w, 0, true), 0.01);
        assert_eq!(lr_at(&w, 40_000, true), 0.01);
        // without a warmup config the flag is ignored
        assert_eq!(lr_at(&h, 0, true), 0.1);
    }

    #[test]
    fn validate_rejects_bad_hyper() {
        let mut h = OptHyper::cifar();
        h.milestones = vec![10, 10];
        assert!(h.validate().is_err());
        let mut h = OptHyper::cifar();
        h.momentum = 1.0;
        assert!(h.validate().is_err());
        assert!(OptHyper::cifar().validate().is_ok());
    }

    #[test]
    fn vanilla_step_and_fixed_point() {
        let h = OptHyper {
            base_lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            milestones: vec![],
            warmup: None,
            decay_all: true,
        };
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.25, 0.5]).unwrap();
        let mut st = OptState::default();
        sgd_step(&mut [&mut p], &[g], &[true], &mut st, &h, 1.0).unwrap();
        assert_eq!(p.data(), &[0.75, -2.5]);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[2]).unwrap()], &[true], &mut OptState::default(), &h, 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = Tensor::<f32>::zeros(&[1]).unwrap();
        let g = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        let err = sgd_step(&mut [&mut p], &[g], &[true], &mut OptState::default(), &OptHyper::cifar(), 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn warmup_latch() {
        let w = OptHyper::cifar_with_warmup().warmup;
        let mut m = WarmupMonitor::new(w);
        assert!(m.update(0.95));
        assert!(!m.update(0.79));
        assert!(!m.update(0.85));
        assert!(!WarmupMonitor::new(None).update(0.99));
    }

    #[test]
    fn running_mean_window() {
        let mut r = RunningMean::new(3);
        assert_eq!(r.mean(), None);
        for v in [1.0, 2.0, 3.0, 4.0] {
            r.push(v);
        }
        assert_eq!(r.mean(), Some(3.0));
    }
}
