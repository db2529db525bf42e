//! AdamW with independent weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Independent decay: subtracted as `λ·w` each step, not scaled by the LR.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1.0 / 8192.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(name, alloc::format!("must lie in [0, 1), got {v}")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", alloc::format!("must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "weight_decay",
                alloc::format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One step over all parameters with per-parameter learning rates `lrs`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64], cfg: &AdamConfig) -> Result<()> {
        let ones = vec![1.0; params.len()];
        self.step_scaled(params, grads, lrs, &ones, cfg)
    }

    /// As [`AdamState::step`], with tensor `i` using `ε·eps_mults[i]`.
    pub fn step_scaled(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lrs: &[f64],
        eps_mults: &[f64],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || lrs.len() != params.len()
            || eps_mults.len() != params.len()
        {
            return Err(Error::invalid(
                "adamw_step",
                alloc::format!(
                    "{} params, {} grads, {} lrs, {} ε factors, {} state slots",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    eps_mults.len(),
                    self.m.len()
                ),
            ));
        }
        if let Some(&lr) = lrs.iter().find(|&&lr| !(lr >= 0.0)) {
            return Err(Error::invalid("lr", alloc::format!("must be non-negative, got {lr}")));
        }
        cfg.validate()?;
        if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v, lr) = (&mut self.m[i], &mut self.v[i], lrs[i]);
            let eps = cfg.eps * eps_mults[i];
            for ((w, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
                let update = lr * (*mj / bc1) / (math::sqrt(*vj / bc2) + eps);
                *w -= update + cfg.weight_decay * *w;
            }
        }
        Ok(())
    }
}
