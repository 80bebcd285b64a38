//! Adam with coupled L2 weight decay and name-prefix parameter freezing.

use crate::error::{CurveError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 strength. Coupled by default: added to the gradient as
    /// `weight_decay * param` before the moment updates.
    pub weight_decay: f64,
    /// Apply the decay directly to the parameter instead of the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.1,
            decoupled_weight_decay: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    slots: HashMap<String, Slot>,
    frozen_prefixes: Vec<String>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            slots: HashMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    /// Parameters whose names start with any of these prefixes are skipped.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        self.frozen_prefixes = prefixes.iter().map(|s| s.to_string()).collect();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter. Call once per batch, before the
    /// per-parameter `update` calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one named parameter in place. Frozen parameters are left
    /// untouched.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.step == 0 {
            return Err(CurveError::Config("call begin_step before update".into()));
        }
        if self.is_frozen(name) {
            return Ok(());
        }
        if param.shape() != grad.shape() {
            return Err(CurveError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if slot.m.len() != param.len() {
            return Err(CurveError::Config(format!(
                "optimizer state for '{name}' has stale size"
            )));
        }
        let c = &self.cfg;
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            let g = if c.decoupled_weight_decay {
                *g
            } else {
                g + c.weight_decay * *p
            };
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            if c.decoupled_weight_decay {
                *p -= c.learning_rate * c.weight_decay * *p;
            }
        }
        Ok(())
    }

    /// Apply one update over `(name, param, grad)` triples.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        self.begin_step();
        for (name, param, grad) in params {
            self.update(name, param, grad)?;
        }
        Ok(())
    }

    pub fn export_state(&self) -> crate::checkpoint::AdamState {
        crate::checkpoint::AdamState {
            step: self.step,
            slots: self
                .slots
                .iter()
                .map(|(k, s)| (k.clone(), (s.m.clone(), s.v.clone())))
                .collect(),
        }
    }

    pub fn from_state(cfg: AdamConfig, state: &crate::checkpoint::AdamState) -> Self {
        Adam {
            cfg,
            step: state.step,
            slots: state
                .slots
                .iter()
                .map(|(k, (m, v))| {
                    (
                        k.clone(),
                        Slot {
                            m: m.clone(),
                            v: v.clone(),
                        },
                    )
                })
                .collect(),
            frozen_prefixes: Vec::new(),
        }
    }
}
