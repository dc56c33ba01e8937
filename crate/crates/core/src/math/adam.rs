use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Bias-corrected Adam. Moments are allocated lazily for parameters that
/// receive gradients; each parameter keeps its own bias-correction count so
/// that parameters updated only on some steps (alternating objectives) are
/// corrected for the updates they actually received.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamConfig,
    step_count: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            hyper,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First/second moment for a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|m| (&m.m, &m.v))
    }

    /// Applies one update. Rejects the whole step, leaving parameters and
    /// state untouched, if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        for (id, g) in grads.params() {
            let mom = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - (beta1 as f64).powi(mom.t as i32);
            let bc2 = 1.0 - (beta2 as f64).powi(mom.t as i32);
            let step_size = (lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let p = store.get_mut(id).data_mut();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
