//! Plain SGD and Adam over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// The same settings with another learning rate.
    pub fn with_lr(self, learning_rate: f64) -> Self {
        OptimizerConfig { learning_rate, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient in `grads`; the others
    /// are left untouched. Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let c = self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        for p in params {
            let Some(g) = grads.get(p.name()) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    let lr = c.learning_rate * clip;
                    p.value = p.value.zip_map(g, |w, g| w - lr * g)?;
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(p.name().to_string())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    *m = m.zip_map(g, |m, g| c.beta1 * m + (1.0 - c.beta1) * g * clip)?;
                    *v = v.zip_map(g, |v, g| c.beta2 * v + (1.0 - c.beta2) * (g * clip).powi(2))?;
                    let (b1, b2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                    let upd = m.zip_map(v, |m, v| c.learning_rate * (m / b1) / ((v / b2).sqrt() + c.eps))?;
                    p.value = p.value.zip_map(&upd, |w, u| w - u)?;
                }
            }
        }
        Ok(norm)
    }
}
