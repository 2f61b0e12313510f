use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 500,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid!("eps must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over a fixed list of parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, flattened across groups in order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: &[&ParamSet]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = groups
            .iter()
            .flat_map(|g| g.tensors().map(|t| Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Applies one update; `grads` holds one tensor per parameter, in the
    /// same flattened order as the groups.
    pub fn update(&mut self, groups: &mut [&mut ParamSet], grads: &[Tensor]) -> Result<()> {
        let count: usize = groups.iter().map(|g| g.len()).sum();
        if count != grads.len() || count != self.m.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, got {count} parameters and {} gradients",
                self.m.len(),
                grads.len()
            ));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let mut i = 0;
        for group in groups.iter_mut() {
            for (name, param) in group.entries.iter_mut() {
                let grad = &grads[i];
                param.same_shape(grad, "optimizer gradient")?;
                grad.ensure_finite("gradient")?;
                let decay = if name.ends_with("_w") { c.weight_decay } else { 0.0 };
                let m = self.m[i].data_mut();
                let v = self.v[i].data_mut();
                for (((p, &gr), mi), vi) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
                }
                i += 1;
            }
        }
        Ok(())
    }
}
