use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyper-parameters. Only the learning rate has a published default
/// for this model family; the betas and epsilon are the usual ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
///
/// Gradients are read but left in place; callers clear them with
/// [`ParamStore::zero_grad`] before the next accumulation.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut AdamState<S>) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters but the store holds {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.requires_grad && p.grad.is_none()) {
        return Err(Error::InvalidArgument(format!("parameter {} has no gradient", p.name)));
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let b1 = S::lit(c.beta1);
    let b2 = S::lit(c.beta2);
    let bc1 = S::lit(1.0 - c.beta1.powi(t));
    let bc2 = S::lit(1.0 - c.beta2.powi(t));
    let lr = S::lit(c.learning_rate);
    let eps = S::lit(c.epsilon);
    let one = S::one();

    for ((p, m), v) in store
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above");
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
