//! Adaptive-moment (Adam) and plain SGD parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Matrix]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn check_shapes(params: &[Matrix], grads: &[Matrix], state: Option<&OptimizerState>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(
            "optimizer",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::dim(
                "optimizer",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(s) = state {
            if !s.m.get(i).is_some_and(|m| m.same_shape(p)) {
                return Err(Error::dim(
                    "optimizer",
                    format!("moment accumulator {i} does not match parameter"),
                ));
            }
        }
    }
    if let Some(s) = state {
        if s.m.len() != params.len() {
            return Err(Error::dim(
                "optimizer",
                format!("{} accumulators for {} parameters", s.m.len(), params.len()),
            ));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    check_shapes(params, grads, Some(state))?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((w, &gi), mi), vi) in pd
            .iter_mut()
            .zip(gd)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi + cfg.weight_decay * *w;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [Matrix], grads: &[Matrix], lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    check_shapes(params, grads, None)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gi + weight_decay * *w);
        }
    }
    Ok(())
}
