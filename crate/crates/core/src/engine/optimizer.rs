use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{DenseMatrix, Parameter};

/// Classic heavy-ball SGD state for one ordered group of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<DenseMatrix>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, params: &[&Parameter]) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = params
            .iter()
            .map(|p| {
                let (r, c) = p.shape();
                DenseMatrix::zeros(r, c)
            })
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[DenseMatrix] {
        &self.velocity
    }
}

/// `v ← m·v + g; θ ← θ − lr·v` for every trainable parameter, then clears
/// all gradients. Frozen parameters are skipped and keep zero velocity.
pub fn sgd_momentum_step(params: &mut [&mut Parameter], opt: &mut OptimizerState) -> Result<()> {
    if params.len() != opt.velocity.len() {
        return Err(Error::LengthMismatch {
            what: "optimizer parameter group",
            left: params.len(),
            right: opt.velocity.len(),
        });
    }
    for (p, v) in params.iter().zip(&opt.velocity) {
        if p.shape() != v.shape() || p.grad.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_momentum_step",
                left: p.shape(),
                right: v.shape(),
            });
        }
    }
    let (lr, m) = (opt.learning_rate, opt.momentum);
    for (p, v) in params.iter_mut().zip(opt.velocity.iter_mut()) {
        if p.requires_grad {
            let grad = p.grad.values();
            for (vi, &g) in v.values_mut().iter_mut().zip(grad) {
                *vi = m * *vi + g;
            }
            for (t, &vi) in p.tensor.values_mut().iter_mut().zip(v.values()) {
                *t -= lr * vi;
            }
        }
        p.zero_grad();
    }
    Ok(())
}

/// `t ← α·t + (1−α)·s`, element-wise.
pub fn ema_update(teacher: &mut [&mut Parameter], student: &[&Parameter], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("ema alpha must lie in [0, 1], got {alpha}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            what: "ema parameter group",
            left: teacher.len(),
            right: student.len(),
        });
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                left: t.shape(),
                right: s.shape(),
            });
        }
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        for (tv, &sv) in t.tensor.values_mut().iter_mut().zip(s.tensor.values()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}
