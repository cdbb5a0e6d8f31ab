use super::params::ParamSet;
use crate::error::{Error, Result};

/// Moment estimates for Adam, index-aligned with one [`ParamSet`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Every parameter must hold a gradient;
/// gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Incompatible(
            params.names().next().unwrap_or("<empty>").to_string(),
        ));
    }
    for ((name, t), m) in params.iter().zip(&state.first_moment) {
        if t.grad().is_none() {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if m.len() != t.numel() {
            return Err(Error::Incompatible(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((_, p), m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let g = p.grad().expect("checked above").to_vec();
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}
