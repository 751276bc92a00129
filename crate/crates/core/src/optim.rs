//! AdamW and plain gradient descent, both honouring per-group learning-rate
//! multipliers and freeze flags from the [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::Adamw),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::UnknownVariant {
                kind: "optimizer",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to tensors of rank >= 2 only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.0,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with base learning rate `lr`. Gradients for frozen
    /// parameters are ignored.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let clip = if self.cfg.grad_clip > 0.0 {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for (name, grad) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let eff_lr = lr * store.lr_mult(name);
            let param = store.get_mut(name)?;
            if param.numel() != grad.numel() {
                return Err(Error::DimensionMismatch(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    grad.numel(),
                    param.numel()
                )));
            }
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= eff_lr * g * clip;
                    }
                }
                OptimizerKind::Adamw => {
                    let decay = if param.rank() >= 2 {
                        self.cfg.weight_decay
                    } else {
                        0.0
                    };
                    let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                        m: Tensor::zeros(param.shape()),
                        v: Tensor::zeros(param.shape()),
                    });
                    let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                    for (((p, g), m), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(st.m.data_mut())
                        .zip(st.v.data_mut())
                    {
                        let g = g * clip;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= eff_lr * (mhat / (vhat.sqrt() + eps) + decay * *p);
                    }
                }
            }
        }
        Ok(())
    }
}
