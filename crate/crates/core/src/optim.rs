//! Adam, reduce-on-plateau learning-rate scheduling, and early stopping.

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};
use crate::train::TrainConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every parameter tensor, plus the shared step
/// count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One update of every parameter.
    ///
    /// A tensor whose gradient is identically zero is left untouched, moments
    /// included, so a zero gradient never moves a parameter whatever the state.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameter tensors", self.m.len()),
                format!("{} parameters and {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", fmt_shape(self.m[i].shape()), format!("parameter {} gradient {}", fmt_shape(p.shape()), fmt_shape(g.shape()))));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.data().iter().all(|&x| x == T::zero()) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

/// Epochs since the best accuracy in `history` was first reached. Only a
/// strictly greater accuracy counts as an improvement.
pub fn epochs_since_best(history: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_at = 0;
    for (i, &acc) in history.iter().enumerate() {
        if acc > best {
            best = acc;
            best_at = i;
        }
    }
    history.len().saturating_sub(best_at + 1)
}

/// Learning rate for the next epoch, given validation accuracies so far.
///
/// Every `plateau_patience` epochs without a new best the rate is multiplied
/// by `lr_factor`, never dropping below `lr_min`.
pub fn plateau_scheduler_step(history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    let stale = epochs_since_best(history);
    if stale > 0 && stale % cfg.plateau_patience == 0 {
        (current_lr * cfg.lr_factor).max(cfg.lr_min)
    } else {
        current_lr
    }
}

/// True once the best accuracy is at least `early_stop_patience` epochs old.
pub fn early_stop_check(history: &[f64], cfg: &TrainConfig) -> bool {
    !history.is_empty() && epochs_since_best(history) >= cfg.early_stop_patience
}
