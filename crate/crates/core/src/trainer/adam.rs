use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply weight decay directly to the parameters (AdamW) instead of
    /// adding it to the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: false,
        }
    }
}

/// First and second moments, one tensor per parameter in
/// [`ModelParams::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of a flat parameter buffer. `step` is the 1-based index
/// of this update.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let mut g = grad[i];
        if !cfg.decoupled {
            g += cfg.weight_decay * param[i];
        }
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let mut delta = m_hat / (v_hat.sqrt() + cfg.eps);
        if cfg.decoupled {
            delta += cfg.weight_decay * param[i];
        }
        param[i] -= cfg.learning_rate * delta;
    }
}

/// Updates every parameter; `grads` follows [`ModelParams::named`] order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut values = params.values_mut();
    if grads.len() != values.len() || state.m.len() != values.len() || state.v.len() != values.len() {
        return Err(Error::Argument(format!(
            "adam_step: {} parameters, {} gradients, {} moments",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), (m, v)) in values
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(&state.v))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Argument(format!(
                "adam_step: shape mismatch {:?} / {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    for (i, p) in values.iter_mut().enumerate() {
        adam_update(
            p.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            state.step,
            cfg,
        );
    }
    Ok(())
}
