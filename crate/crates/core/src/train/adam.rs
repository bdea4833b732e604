use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment buffers for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update of every trainable tensor in `params`,
/// using the gradient stored on each tensor. Frozen tensors are skipped.
pub fn adam_step(
    params: &mut [&mut Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters for an optimizer built over {}",
            params.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.requires_grad() && p.grad_data().is_none() {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if p.len() != state.m[i].len() {
            return Err(Error::shapes("Adam buffer", p.shape(), &[state.m[i].len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad_data().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
