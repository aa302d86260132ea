use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Parameter, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    pub first: Vec<Real>,
    pub second: Vec<Real>,
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    pub(crate) moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn restore(
        config: AdamConfig,
        step: u64,
        moments: BTreeMap<String, Moments>,
    ) -> Self {
        Adam {
            config,
            step,
            moments,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[Real]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[Real]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// Applies one update to every trainable parameter. Fails without
    /// touching anything if a trainable parameter has no gradient.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        let mut grads = Vec::with_capacity(params.len());
        for p in params.iter() {
            if !p.trainable {
                grads.push(None);
                continue;
            }
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| Error::Graph(format!("parameter {} has no gradient", p.name)))?;
            grads.push(Some(g));
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as Real, beta2 as Real);

        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let state = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    first: vec![0.0; g.len()],
                    second: vec![0.0; g.len()],
                });
            if state.first.len() != g.len() {
                return Err(Error::shape(format!(
                    "optimizer state for {} has {} entries, parameter has {}",
                    p.name,
                    state.first.len(),
                    g.len()
                )));
            }
            let mut values = p.tensor.values().to_vec();
            for (((v, m), s), gi) in values
                .iter_mut()
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
                .zip(&g)
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *s = b2 * *s + (1.0 - b2) * gi * gi;
                let m_hat = *m as f64 / c1;
                let s_hat = *s as f64 / c2;
                *v -= (lr * m_hat / (s_hat.sqrt() + eps)) as Real;
            }
            p.tensor = p.tensor.with_values(values);
        }
        Ok(())
    }
}
