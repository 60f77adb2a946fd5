use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or_else(|| format!("#{i}"), Clone::clone);
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let mh = *mk / c1;
            let vh = *vk / c2;
            *x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
