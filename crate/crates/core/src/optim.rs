//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Absent: chosen from the attachment kind.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: None,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.lr {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("learning rate {lr} must be nonnegative")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter moment state keyed by name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, cfg: &OptimizerConfig) -> Self {
        AdamW {
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; bias corrections use the incremented count.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place:
    /// `p ← p − lr·wd·p`, then the bias-corrected Adam step.
    pub fn update(&mut self, name: &str, value: &mut [f64], grad: &[f64]) -> Result<()> {
        if value.len() != grad.len() {
            return Err(Error::dim("adamw", format!("`{name}`: {} values, {} grads", value.len(), grad.len())));
        }
        if self.step == 0 {
            return Err(Error::Usage("update before begin_step".into()));
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; value.len()],
            v: vec![0.0; value.len()],
        });
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..value.len() {
            let g = grad[i];
            value[i] -= self.lr * self.weight_decay * value[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
