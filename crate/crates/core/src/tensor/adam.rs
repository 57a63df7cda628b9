use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Initial learning rate reported for fine-tuning in the original
    /// experiments. Unusually large for ADAM; kept as a selectable value.
    pub const REPORTED_LR: f64 = 0.1;
    /// Learning rate used for the desk-scale runs.
    pub const DESK_LR: f64 = 1e-3;
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: Self::DESK_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// ADAM with bias correction. Moments are kept per parameter name; frozen
/// parameters are never read or written.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Internal(format!("no gradient for trainable `{name}`")))?;
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape("adam", g.shape(), p.tensor.shape()));
            }
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (
                    Tensor::zeros(p.tensor.shape()),
                    Tensor::zeros(p.tensor.shape()),
                )
            });
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi as f64 / bias1;
                let v_hat = *vi as f64 / bias2;
                *w -= (c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}
