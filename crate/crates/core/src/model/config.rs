use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity used inside the MLP block (and optionally the adapter).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    GeluTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// `f(X·W1 + b1)·W2 + b2`
    Standard,
    /// `(f(X·Wsᵀ) ⊙ X·Weᵀ)·Woᵀ`, bias-free.
    Gated,
}

/// Where layer norms sit relative to the residual additions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `h + Attn(LN(h))`, then `h + MLP(LN(h))`, final LN before the head.
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Maximum number of positions a layer attends over, virtual prompt or
    /// prefix rows included.
    pub max_seq_len: usize,
    pub activation: Activation,
    pub mlp_kind: MlpKind,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub layer_norm_eps: f64,
    /// Standard deviation of the normal used for every weight matrix and
    /// embedding table; biases start at zero, norms at identity.
    pub init_std: f64,
    pub norm_placement: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 2,
            vocab_size: 128,
            max_seq_len: 96,
            activation: Activation::Relu,
            mlp_kind: MlpKind::Standard,
            dropout_p: 0.1,
            num_classes: 2,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            norm_placement: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::config("layer_norm_eps and init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
