//! Adam with bias correction and lazy row updates for embedding tables.

use serde::{Deserialize, Serialize};

use crate::error::{AdsError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Gradients, ParamGrad};

pub const DEFAULT_LR: f64 = 0.00002;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(AdsError::Config(format!("invalid adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment buffers for every parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One optimizer step. Dense parameters take the textbook update;
    /// embedding tables update only the rows present in `grads`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = store.get(id);
            let finite = match g {
                ParamGrad::Dense(d) => d.iter().all(|x| x.is_finite()),
                ParamGrad::Rows(rows) => rows.values().flatten().all(|x| x.is_finite()),
            };
            if !finite {
                return Err(AdsError::NonFinite {
                    what: "gradient",
                    detail: format!("parameter {}", p.name),
                });
            }
            let expected = p.value.len();
            if let ParamGrad::Dense(d) = g {
                if d.len() != expected {
                    return Err(AdsError::dim("adam_step", p.value.shape(), &[d.len()]));
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let ParamId(i) = id;
            let param = store.get_mut(id);
            let row_len = param.value.last_dim();
            let values = param.value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut update = |j: usize, gj: f64| {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            };
            match g {
                ParamGrad::Dense(d) => d.iter().enumerate().for_each(|(j, &gj)| update(j, gj)),
                ParamGrad::Rows(rows) => {
                    for (&r, row) in rows {
                        for (k, &gj) in row.iter().enumerate() {
                            update(r * row_len + k, gj);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
