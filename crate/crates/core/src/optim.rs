//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{AsmilError, Result};
use crate::model::{ParamGrads, ParamSet};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .iter()
            .map(|(_, m)| DenseMatrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam step. Weight decay is applied first as
/// `θ ← θ − lr·wd·θ`, separately from the adaptive increment.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.0.len() != params.len() || state.first.len() != params.len() {
        return Err(AsmilError::contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.0.len(),
            state.first.len()
        )));
    }
    for ((_, p), (g, m)) in params.iter().zip(grads.0.iter().zip(&state.first)) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(AsmilError::contract(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(&grads.0)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * weight_decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0·½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(AsmilError::domain(format!(
            "schedule step {step} exceeds total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (PI * frac).cos()))
}
