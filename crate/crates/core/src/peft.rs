//! Parameter-efficient attachments: LoRA, bottleneck adapters, prefix and
//! prompt tuning, plus trainable-parameter accounting.
//!
//! Every attachment parameter lives in the attachment's own [`ParamStore`]
//! under the `peft.` namespace, keyed by kind and site, e.g.
//! `peft.lora.layers.0.q.a`. The backbone never holds attachment weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{normal_tensor, Activation, ModelConfig, ParamStore, TransformerModel};
use crate::objective::AdaptiveWeights;
use crate::tensor::Tensor;

/// Attention projection a LoRA pair can be attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraSite {
    Q,
    K,
    V,
    O,
}

impl LoraSite {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraSite::Q => "q",
            LoraSite::K => "k",
            LoraSite::V => "v",
            LoraSite::O => "o",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftKind {
    None,
    Lora,
    Adapter,
    Prefix,
    Prompt,
}

/// Attachment choice with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PeftConfig {
    /// No attachment; only the classifier head trains.
    None,
    Lora {
        #[serde(default = "default_lora_rank")]
        rank: usize,
        #[serde(default = "default_lora_alpha")]
        alpha: f64,
        #[serde(default = "default_lora_sites")]
        sites: Vec<LoraSite>,
    },
    Adapter {
        #[serde(default = "default_reduction")]
        reduction_factor: usize,
        #[serde(default = "default_adapter_nonlinearity")]
        nonlinearity: Activation,
    },
    Prefix {
        #[serde(default = "default_virtual_tokens")]
        length: usize,
    },
    Prompt {
        #[serde(default = "default_virtual_tokens")]
        length: usize,
    },
}

fn default_lora_rank() -> usize {
    8
}
fn default_lora_alpha() -> f64 {
    16.0
}
fn default_lora_sites() -> Vec<LoraSite> {
    vec![LoraSite::Q, LoraSite::V]
}
fn default_reduction() -> usize {
    16
}
fn default_adapter_nonlinearity() -> Activation {
    Activation::Relu
}
fn default_virtual_tokens() -> usize {
    60
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig::Lora {
            rank: default_lora_rank(),
            alpha: default_lora_alpha(),
            sites: default_lora_sites(),
        }
    }
}

impl PeftConfig {
    pub fn kind(&self) -> PeftKind {
        match self {
            PeftConfig::None => PeftKind::None,
            PeftConfig::Lora { .. } => PeftKind::Lora,
            PeftConfig::Adapter { .. } => PeftKind::Adapter,
            PeftConfig::Prefix { .. } => PeftKind::Prefix,
            PeftConfig::Prompt { .. } => PeftKind::Prompt,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match self {
            PeftConfig::None => Ok(()),
            PeftConfig::Lora { rank, alpha, sites } => {
                if *rank == 0 {
                    return Err(Error::config("LoRA rank must be at least 1"));
                }
                if *rank > model.d_model {
                    return Err(Error::config(format!(
                        "LoRA rank {rank} exceeds projection width {}",
                        model.d_model
                    )));
                }
                if !alpha.is_finite() || *alpha <= 0.0 {
                    return Err(Error::config("LoRA alpha must be positive"));
                }
                if sites.is_empty() {
                    return Err(Error::config("LoRA needs at least one site"));
                }
                Ok(())
            }
            PeftConfig::Adapter {
                reduction_factor, ..
            } => {
                let m = adapter_width(model.d_model, *reduction_factor)?;
                if m >= model.d_model {
                    return Err(Error::config(format!(
                        "adapter bottleneck {m} must be narrower than {}",
                        model.d_model
                    )));
                }
                Ok(())
            }
            PeftConfig::Prefix { length } | PeftConfig::Prompt { length } => {
                if *length >= model.max_seq_len {
                    return Err(Error::config(format!(
                        "{length} virtual tokens leave no room within max_seq_len {}",
                        model.max_seq_len
                    )));
                }
                Ok(())
            }
        }
    }

    /// Virtual rows a prompt or prefix adds in front of the tokens.
    pub fn virtual_tokens(&self) -> usize {
        match self {
            PeftConfig::Prefix { length } | PeftConfig::Prompt { length } => *length,
            _ => 0,
        }
    }
}

fn adapter_width(d_model: usize, reduction_factor: usize) -> Result<usize> {
    if reduction_factor == 0 {
        return Err(Error::config("adapter reduction factor must be positive"));
    }
    Ok((d_model / reduction_factor).max(1))
}

/// Trainable parameters Φ of one attachment bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftAttachment {
    pub config: PeftConfig,
    pub params: ParamStore,
}

impl PeftAttachment {
    /// Creates the attachment with standard initialization: LoRA up-projection
    /// `W_A` and adapter up-projection `U` start at zero, so the attached
    /// model computes exactly what the bare model does.
    pub fn new(model: &ModelConfig, config: PeftConfig, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = model.d_model;
        match &config {
            PeftConfig::None => {}
            PeftConfig::Lora { rank, sites, .. } => {
                let std = 1.0 / (d as f64).sqrt();
                for l in 0..model.layers {
                    for site in sites {
                        let base = format!("peft.lora.layers.{l}.{}", site.as_str());
                        params.insert(format!("{base}.a"), Tensor::zeros(&[d, *rank]), true);
                        params.insert(format!("{base}.b"), normal_tensor(&mut rng, &[*rank, d], std), true);
                    }
                }
            }
            PeftConfig::Adapter {
                reduction_factor, ..
            } => {
                let m = adapter_width(d, *reduction_factor)?;
                let std = 1.0 / (d as f64).sqrt();
                for l in 0..model.layers {
                    let base = format!("peft.adapter.layers.{l}");
                    params.insert(format!("{base}.down"), normal_tensor(&mut rng, &[m, d], std), true);
                    params.insert(format!("{base}.up"), Tensor::zeros(&[d, m]), true);
                }
            }
            PeftConfig::Prompt { length } => {
                params.insert(
                    "peft.prompt.embedding",
                    normal_tensor(&mut rng, &[*length, d], model.init_std),
                    true,
                );
            }
            PeftConfig::Prefix { length } => {
                params.insert(
                    "peft.prefix.embedding",
                    normal_tensor(&mut rng, &[model.layers, *length, d], model.init_std),
                    true,
                );
            }
        }
        Ok(PeftAttachment { config, params })
    }

    pub fn kind(&self) -> PeftKind {
        self.config.kind()
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    pub(crate) fn lora_scale(&self) -> Option<f64> {
        match self.config {
            PeftConfig::Lora { rank, alpha, .. } => Some(alpha / rank as f64),
            _ => None,
        }
    }

    pub(crate) fn lora_sites(&self) -> &[LoraSite] {
        match &self.config {
            PeftConfig::Lora { sites, .. } => sites,
            _ => &[],
        }
    }
}

/// Graph handles of one LoRA pair.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    /// Up-projection `W_A` (`out × r`).
    pub a: Var,
    /// Down-projection `W_B` (`r × in`).
    pub b: Var,
    pub scale: f64,
}

/// `x · (W + scale·W_A·W_B)ᵀ` as frozen path plus low-rank path; the update
/// matrix is never materialized.
pub fn lora_forward(g: &mut Graph, x: Var, w_frozen: Var, lora: &LoraVars) -> Result<Var> {
    let frozen = g.matmul_t(x, w_frozen)?;
    let delta = lora_delta(g, x, lora)?;
    g.add(frozen, delta)
}

pub(crate) fn lora_delta(g: &mut Graph, x: Var, lora: &LoraVars) -> Result<Var> {
    let down = g.matmul_t(x, lora.b)?;
    let up = g.matmul_t(down, lora.a)?;
    g.scale(up, lora.scale)
}

/// `h + U·Ω(D·h)` with the residual included.
pub fn adapter_forward(
    g: &mut Graph,
    h: Var,
    down: Var,
    up: Var,
    nonlinearity: Activation,
) -> Result<Var> {
    let z = g.matmul_t(h, down)?;
    let a = match nonlinearity {
        Activation::Relu => g.relu(z)?,
        Activation::GeluTanh => g.gelu_tanh(z)?,
    };
    let u = g.matmul_t(a, up)?;
    g.add(h, u)
}

/// Broadcasts `rows` (`P × d`) over the batch and prepends it to `x`
/// (`B × T × d`), widening `mask` with ones.
fn prepend_rows(g: &mut Graph, x: Var, mask: &Tensor, rows: Var) -> Result<(Var, Tensor)> {
    let xs = g.shape(x).to_vec();
    let rs = g.shape(rows).to_vec();
    if xs.len() != 3 || rs.len() != 2 || rs[1] != xs[2] || mask.shape() != &xs[..2] {
        return Err(Error::dim(
            "prepend",
            format!("rows {rs:?} onto {xs:?} with mask {:?}", mask.shape()),
        ));
    }
    let (b, t, p) = (xs[0], xs[1], rs[0]);
    let zeros = g.constant(Tensor::zeros(&[b, p, xs[2]]));
    let expanded = g.add(zeros, rows)?;
    let out = g.concat(&[expanded, x], 1)?;
    let mut widened = Vec::with_capacity(b * (p + t));
    for row in mask.data().chunks(t) {
        widened.extend(std::iter::repeat_n(1.0, p));
        widened.extend_from_slice(row);
    }
    Ok((out, Tensor::from_parts(vec![b, p + t], widened)))
}

/// Prepends the soft prompt to embedded input. The classifier readout
/// index shifts by the prompt length.
pub fn prompt_prepend(
    g: &mut Graph,
    embedded: Var,
    mask: &Tensor,
    prompt: Var,
    max_positions: usize,
) -> Result<(Var, Tensor)> {
    let t = g.shape(embedded).get(1).copied().unwrap_or(0);
    let p = g.shape(prompt)[0];
    if p + t > max_positions {
        return Err(Error::Length(format!(
            "prompt of {p} plus {t} tokens exceeds {max_positions} positions"
        )));
    }
    prepend_rows(g, embedded, mask, prompt)
}

/// Prepends layer `layer_index`'s prefix rows to that layer's hidden states.
/// The caller strips them again after the block.
pub fn prefix_inject(
    g: &mut Graph,
    layer_input: Var,
    mask: &Tensor,
    layer_index: usize,
    prefix: Var,
) -> Result<(Var, Tensor)> {
    let ps = g.shape(prefix).to_vec();
    if ps.len() != 3 {
        return Err(Error::dim("prefix_inject", format!("prefix shape {ps:?}")));
    }
    if layer_index >= ps[0] {
        return Err(Error::Range {
            what: "prefix layer",
            index: layer_index,
            len: ps[0],
        });
    }
    let rows = g.slice(prefix, 0, layer_index, 1)?;
    let rows = g.reshape(rows, &[ps[1], ps[2]])?;
    prepend_rows(g, layer_input, mask, rows)
}

/// Parameter counts behind the trainable percentage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    /// Θ ∪ head, all backbone-store arrays.
    pub backbone: usize,
    pub attachment: usize,
    pub adaptive: usize,
    /// |Φ|: every array flagged trainable across the three stores.
    pub trainable: usize,
    /// |Θ| + |Φ|
    pub total: usize,
}

impl ParameterCensus {
    pub fn trainable_percent(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.trainable as f64 / self.total as f64
    }
}

pub fn census(
    model: &TransformerModel,
    attachment: Option<&PeftAttachment>,
    adaptive: Option<&AdaptiveWeights>,
) -> ParameterCensus {
    let backbone = model.params.numel();
    let attachment_n = attachment.map_or(0, PeftAttachment::numel);
    let adaptive_n = adaptive.map_or(0, |a| a.values.len());
    let trainable = model.params.trainable_numel()
        + attachment.map_or(0, |a| a.params.trainable_numel())
        + adaptive.filter(|a| a.trainable).map_or(0, |a| a.values.len());
    ParameterCensus {
        backbone,
        attachment: attachment_n,
        adaptive: adaptive_n,
        trainable,
        total: backbone + attachment_n + adaptive_n,
    }
}

/// `100·|Φ| / (|Θ| + |Φ|)`
pub fn trainable_percent(
    model: &TransformerModel,
    attachment: Option<&PeftAttachment>,
    adaptive: Option<&AdaptiveWeights>,
) -> f64 {
    census(model, attachment, adaptive).trainable_percent()
}
