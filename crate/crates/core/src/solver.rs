//! Momentum SGD and the learning-rate schedule.
//!
//! Two algebraically equivalent update forms are provided. The reference form
//! keeps a learning-rate-free momentum buffer `u`:
//!
//! ```text
//! u <- m*u + g
//! w <- w - lr*u
//! ```
//!
//! The absorbed form keeps `v = lr*u` instead, and must rescale `v` by
//! `lr_t / lr_{t-1}` whenever the learning rate changes to stay on the same
//! trajectory:
//!
//! ```text
//! v <- m*(lr/last_lr)*v + lr*g
//! w <- w - v
//! ```
//!
//! `g` is always the fully aggregated gradient with the weight-decay term
//! already added (see [`apply_weight_decay`]).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmup {
    None,
    /// Hold the unscaled base rate for the warmup period.
    Constant,
    /// Ramp linearly from the base rate to the scaled target.
    Gradual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    Linear,
    Sqrt,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumForm {
    Reference,
    Absorbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Learning rate for a total minibatch of `ref_kn`.
    pub base_lr: f64,
    pub ref_kn: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the post-warmup rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub warmup: Warmup,
    pub warmup_epochs: usize,
    pub scaling: Scaling,
    pub momentum_form: MomentumForm,
    pub momentum_correction: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            ref_kn: 256,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![30, 60, 80],
            decay_factor: 0.1,
            warmup: Warmup::None,
            warmup_epochs: 5,
            scaling: Scaling::Linear,
            momentum_form: MomentumForm::Reference,
            momentum_correction: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is accepted and freezes training.
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::config(
                "solver.base_lr",
                "must be non-negative and finite",
            ));
        }
        if self.ref_kn == 0 {
            return Err(Error::config("solver.ref_kn", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("solver.momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("solver.weight_decay", "must be non-negative"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "solver.milestones",
                "must be strictly increasing",
            ));
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(Error::config("solver.decay_factor", "must be positive"));
        }
        if self.warmup != Warmup::None {
            if self.warmup_epochs == 0 {
                return Err(Error::config(
                    "solver.warmup_epochs",
                    "must be positive when warmup is enabled",
                ));
            }
            if let Some(&m) = self.milestones.iter().find(|&&m| m < self.warmup_epochs) {
                return Err(Error::config(
                    "solver.milestones",
                    format!("milestone {m} falls inside the warmup period"),
                ));
            }
        }
        Ok(())
    }

    /// Post-warmup learning rate for a total minibatch of `kn`, before decay.
    pub fn target_lr(&self, kn: usize) -> f64 {
        match self.scaling {
            Scaling::Linear => linear_scaled_lr(self.base_lr, kn, self.ref_kn),
            Scaling::Sqrt => sqrt_scaled_lr(self.base_lr, kn, self.ref_kn),
            Scaling::None => self.base_lr,
        }
    }
}

/// `base_lr * kn / ref_kn`.
pub fn linear_scaled_lr(base_lr: f64, kn: usize, ref_kn: usize) -> f64 {
    base_lr * kn as f64 / ref_kn as f64
}

/// `base_lr * sqrt(kn / ref_kn)`.
pub fn sqrt_scaled_lr(base_lr: f64, kn: usize, ref_kn: usize) -> f64 {
    base_lr * (kn as f64 / ref_kn as f64).sqrt()
}

/// Learning rate at global iteration `iter` for a total minibatch of `kn`.
pub fn lr_at(config: &SolverConfig, kn: usize, iter: usize, iters_per_epoch: usize) -> f64 {
    let ipe = iters_per_epoch.max(1);
    let target = config.target_lr(kn);
    let warmup_iters = config.warmup_epochs * ipe;
    if iter < warmup_iters {
        match config.warmup {
            Warmup::None => {}
            Warmup::Constant => return config.base_lr,
            Warmup::Gradual => {
                let frac = iter as f64 / warmup_iters as f64;
                return config.base_lr + frac * (target - config.base_lr);
            }
        }
    }
    let epoch = iter / ipe;
    let passed = config.milestones.iter().filter(|&&m| epoch >= m).count();
    target * config.decay_factor.powi(passed as i32)
}

/// `grad + lambda * w`. Applied to the aggregated gradient, never folded into
/// the per-sample loss.
pub fn apply_weight_decay(grad: &Tensor, w: &Tensor, lambda: f64) -> Result<Tensor> {
    let mut out = grad.clone();
    out.add_scaled(lambda, w)?;
    Ok(out)
}

/// `grad + lambda * mask * w`, where `mask` selects the decayed parameters.
pub fn apply_masked_weight_decay(
    grad: &Tensor,
    w: &Tensor,
    mask: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if mask.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            left: w.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let mut out = grad.clone();
    if grad.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    for ((g, &wv), &m) in out.data_mut().iter_mut().zip(w.data()).zip(mask.data()) {
        *g += lambda * m * wv;
    }
    Ok(out)
}

/// Momentum buffer plus the bookkeeping the absorbed form needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// `u` in the reference form, `v = lr*u` in the absorbed form.
    pub buffer: Tensor,
    pub last_lr: f64,
    pub iter: usize,
}

impl SolverState {
    pub fn new(param_count: usize) -> Self {
        Self {
            buffer: Tensor::zeros(&[param_count]),
            last_lr: 0.0,
            iter: 0,
        }
    }
}

pub fn step_reference(
    state: &mut SolverState,
    w: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    state.buffer.scale(momentum);
    state.buffer.add_assign(grad)?;
    w.add_scaled(-lr, &state.buffer)?;
    state.last_lr = lr;
    state.iter += 1;
    Ok(())
}

pub fn step_absorbed(
    state: &mut SolverState,
    w: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    correction: bool,
) -> Result<()> {
    let mut factor = momentum;
    if correction && state.iter > 0 && lr != state.last_lr {
        if state.last_lr == 0.0 {
            return Err(Error::ZeroLastLr);
        }
        factor *= lr / state.last_lr;
    }
    state.buffer.scale(factor);
    state.buffer.add_scaled(lr, grad)?;
    w.add_scaled(-1.0, &state.buffer)?;
    state.last_lr = lr;
    state.iter += 1;
    Ok(())
}

/// Momentum SGD dispatching on the configured update form.
#[derive(Debug, Clone)]
pub struct Solver {
    pub momentum: f64,
    pub form: MomentumForm,
    pub correction: bool,
    pub state: SolverState,
}

impl Solver {
    pub fn new(config: &SolverConfig, param_count: usize) -> Self {
        Self {
            momentum: config.momentum,
            form: config.momentum_form,
            correction: config.momentum_correction,
            state: SolverState::new(param_count),
        }
    }

    pub fn step(&mut self, w: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        match self.form {
            MomentumForm::Reference => step_reference(&mut self.state, w, grad, lr, self.momentum),
            MomentumForm::Absorbed => {
                step_absorbed(&mut self.state, w, grad, lr, self.momentum, self.correction)
            }
        }
    }
}
