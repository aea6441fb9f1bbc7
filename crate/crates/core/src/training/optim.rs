use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ModuleGraph;
use crate::tensor::{Gradients, Tensor};

/// Anything that can hand out its parameters by full name.
pub trait ParamStore {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for ModuleGraph {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        ModuleGraph::param_mut(self, name)
    }
}

impl ParamStore for BTreeMap<String, Tensor> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipInfo {
    pub pre_norm: f64,
    pub post_norm: f64,
    pub clipped: bool,
}

/// Rescales every gradient so the global ℓ2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> ClipInfo {
    let pre = grads.global_norm();
    if pre > max_norm && pre.is_finite() {
        let s = max_norm / pre;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        ClipInfo {
            pre_norm: pre,
            post_norm: grads.global_norm(),
            clipped: true,
        }
    } else {
        ClipInfo {
            pre_norm: pre,
            post_norm: pre,
            clipped: false,
        }
    }
}

/// AdamW with decoupled weight decay; moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips, then applies one update at learning rate `lr`.
    pub fn step(&mut self, params: &mut impl ParamStore, grads: &mut Gradients, lr: f64) -> Result<ClipInfo> {
        let info = match self.config.clip {
            Some(c) => clip_global_norm(grads, c),
            None => {
                let n = grads.global_norm();
                ClipInfo {
                    pre_norm: n,
                    post_norm: n,
                    clipped: false,
                }
            }
        };
        if !grads.is_finite() {
            return Err(Error::Diverged {
                stage: 0,
                detail: format!("non-finite gradient (norm {})", info.pre_norm),
            });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads.iter() {
            let p = params
                .param_mut(name)
                .ok_or_else(|| Error::InvalidSpec(format!("optimizer has no parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    detail: format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w -= lr * c.weight_decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(info)
    }
}
