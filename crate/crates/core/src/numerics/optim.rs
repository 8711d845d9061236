//! SGD with momentum and Adam, operating on named parameters of a bundle.

use std::collections::BTreeMap;

use super::bundle::ParameterBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Weight decay is added to the gradient (coupled L2).
    SgdMomentum { momentum: f32 },
    /// Weight decay shrinks parameters directly (decoupled).
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// Optimizer bound to a fixed, ordered group of parameter names.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    params: Vec<String>,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: Vec<String>) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            params,
            moments: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f32) -> Result<()> {
        self.config.lr = lr;
        self.config.validate()
    }

    /// Global L2 norm of the group's gradients.
    pub fn grad_norm(&self, bundle: &ParameterBundle) -> Result<f32> {
        let mut total = 0.0f64;
        for name in &self.params {
            let g = grad_of(bundle, name)?;
            total += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        Ok(total.sqrt() as f32)
    }

    /// Rescales the group's gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&self, bundle: &mut ParameterBundle, max_norm: f32) -> Result<f32> {
        let norm = self.grad_norm(bundle)?;
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for name in &self.params {
                if let Some(g) = bundle.get_mut(name)?.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        Ok(norm)
    }

    /// Applies one update to every parameter in the group.
    pub fn step(&mut self, bundle: &mut ParameterBundle) -> Result<()> {
        for name in &self.params {
            grad_of(bundle, name)?;
        }
        self.steps += 1;
        let OptimizerConfig { kind, lr, weight_decay } = self.config;
        for name in &self.params {
            let t = bundle.get_mut(name)?;
            let grad = t.grad.clone().expect("checked above");
            let moments = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: match kind {
                    OptimizerKind::Adam { .. } => vec![0.0; grad.len()],
                    OptimizerKind::SgdMomentum { .. } => Vec::new(),
                },
            });
            let data = t.data_mut();
            match kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for ((w, g), v) in data.iter_mut().zip(&grad).zip(moments.first.iter_mut()) {
                        let d = g + weight_decay * *w;
                        *v = momentum * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in data
                        .iter_mut()
                        .zip(&grad)
                        .zip(moments.first.iter_mut())
                        .zip(moments.second.iter_mut())
                    {
                        *w -= lr * weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self, bundle: &mut ParameterBundle) -> Result<()> {
        for name in &self.params {
            bundle.get_mut(name)?.zero_grad();
        }
        Ok(())
    }
}

fn grad_of<'a>(bundle: &'a ParameterBundle, name: &str) -> Result<&'a [f32]> {
    bundle
        .get(name)?
        .grad
        .as_deref()
        .ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))
}
