//! AdamW with decoupled weight decay and host-side, serializable moments.

use candle_core::{backprop::GradStore, Var};
use serde::{Deserialize, Serialize};

use super::params::{f64_to_tensor, tensor_to_f64, Blob};
use crate::config::OptimizerConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub lr: f64,
    pub step: u64,
}

pub struct AdamW {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, vars: Vec<(String, Var)>) -> Self {
        let m: Vec<Vec<f64>> = vars
            .iter()
            .map(|(_, v)| vec![0.0; v.elem_count()])
            .collect();
        Self {
            lr: cfg.lr,
            cfg,
            step: 0,
            v: m.clone(),
            m,
            vars,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Applies the per-epoch exponential learning-rate decay.
    pub fn decay_lr(&mut self) {
        self.lr *= self.cfg.lr_decay;
    }

    /// One update from `grads`. Variables absent from `grads` (not on the loss
    /// graph) are left untouched, weight decay included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps, wd) = (self.lr, self.cfg.eps, self.cfg.weight_decay);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = tensor_to_f64(g)?;
            let mut p = tensor_to_f64(var.as_tensor())?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + eps) + wd * p[j]);
            }
            var.set(&f64_to_tensor(p, var.dims(), var.dtype())?)?;
        }
        Ok(())
    }

    pub fn meta(&self) -> AdamMeta {
        AdamMeta {
            lr: self.lr,
            step: self.step,
        }
    }

    /// Moments as blobs named `m/<param>` and `v/<param>`.
    pub fn state_blobs(&self) -> Vec<Blob> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (tag, data) in [("m", &self.m[i]), ("v", &self.v[i])] {
                out.push(Blob {
                    name: format!("{tag}/{name}"),
                    shape: var.dims().to_vec(),
                    data: data.clone(),
                });
            }
        }
        out
    }

    pub fn load_state(&mut self, meta: &AdamMeta, blobs: &[Blob]) -> Result<()> {
        let find = |key: String, len: usize| -> Result<Vec<f64>> {
            let b = blobs
                .iter()
                .find(|b| b.name == key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
            if b.data.len() != len {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {key} has wrong length"
                )));
            }
            Ok(b.data.clone())
        };
        let mut m = Vec::with_capacity(self.vars.len());
        let mut v = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            m.push(find(format!("m/{name}"), var.elem_count())?);
            v.push(find(format!("v/{name}"), var.elem_count())?);
        }
        self.m = m;
        self.v = v;
        self.lr = meta.lr;
        self.step = meta.step;
        Ok(())
    }
}
