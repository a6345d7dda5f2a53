//! Density loss, nonzero-count surrogates, combined objectives and the
//! adaptive layerwise weights `S`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{feature_map, mask_3d, Activation, ActivationTrace, MlpKind, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// `tanh(βx)`
    Tanh,
    /// `x² / (x² + ε)`
    L0Hat,
    /// `2σ(βx) − 1`
    Sigmoid,
    /// `|x|`
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: SurrogateKind::Tanh,
            beta: 20.0,
            epsilon: 1e-7,
        }
    }
}

impl SurrogateConfig {
    pub fn with_kind(kind: SurrogateKind) -> Self {
        SurrogateConfig {
            kind,
            ..Self::default()
        }
    }

    /// tanh for ReLU models, l0_hat for gated or GeLU models.
    pub fn default_for(model: &ModelConfig) -> Self {
        if model.mlp_kind == MlpKind::Gated || model.activation != Activation::Relu {
            Self::with_kind(SurrogateKind::L0Hat)
        } else {
            Self::default()
        }
    }

    pub fn validate(&self, activation: Activation) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("surrogate beta {} must be positive", self.beta)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("surrogate epsilon {} must be positive", self.epsilon)));
        }
        if self.kind == SurrogateKind::Tanh && activation != Activation::Relu {
            return Err(Error::config("the tanh surrogate requires nonnegative (ReLU) activations"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Surrogate over the batch-averaged feature map `s_l`.
    FeatureMap,
    /// Surrogate over every unmasked entry of `O_l`.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityLossConfig {
    pub alpha: f64,
    pub granularity: Granularity,
    /// Falls back to [`SurrogateConfig::default_for`] when absent.
    pub surrogate: Option<SurrogateConfig>,
}

impl Default for DensityLossConfig {
    fn default() -> Self {
        DensityLossConfig {
            alpha: 1.0,
            granularity: Granularity::FeatureMap,
            surrogate: None,
        }
    }
}

impl DensityLossConfig {
    pub fn resolved_surrogate(&self, model: &ModelConfig) -> SurrogateConfig {
        self.surrogate.unwrap_or_else(|| SurrogateConfig::default_for(model))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        self.resolved_surrogate(model).validate(model.activation)
    }
}

/// Elementwise surrogate `g(x)`.
pub fn surrogate_apply(g: &mut Graph, x: Var, cfg: &SurrogateConfig) -> Result<Var> {
    if cfg!(debug_assertions) && matches!(cfg.kind, SurrogateKind::Tanh | SurrogateKind::Sigmoid) {
        if let Some(v) = g.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::contract(format!(
                "{:?} surrogate applied to negative activation {v}",
                cfg.kind
            )));
        }
    }
    match cfg.kind {
        SurrogateKind::Tanh => g.tanh_scaled(x, cfg.beta),
        SurrogateKind::L0Hat => {
            let sq = g.square(x)?;
            let inv = g.reciprocal_eps(sq, cfg.epsilon)?;
            g.mul(sq, inv)
        }
        SurrogateKind::Sigmoid => {
            let z = g.scale(x, cfg.beta)?;
            let s = g.sigmoid(z)?;
            let s = g.scale(s, 2.0)?;
            g.add_scalar(s, -1.0)
        }
        SurrogateKind::L1 => g.abs(x),
    }
}

fn layer_terms(
    g: &mut Graph,
    trace: &ActivationTrace,
    scales: Option<Var>,
    granularity: Granularity,
    surrogate: &SurrogateConfig,
) -> Result<Var> {
    if trace.is_empty() {
        return Err(Error::contract("density loss over an empty trace"));
    }
    let valid = trace.mask.data().iter().filter(|&&m| m != 0.0).count();
    if valid == 0 {
        return Err(Error::contract("density loss over an all-masked batch"));
    }
    let mask = match granularity {
        Granularity::PerToken => Some(mask_3d(g, &trace.mask)?),
        Granularity::FeatureMap => None,
    };
    let mut total: Option<Var> = None;
    let mut n = 0usize;
    for (l, layer) in trace.layers.iter().enumerate() {
        let d_ff = *g.shape(layer.pattern).last().unwrap_or(&0);
        let mut o = layer.pattern;
        if let Some(s) = scales {
            let s_l = g.slice(s, 0, l, 1)?;
            o = g.mul(o, s_l)?;
        }
        let term = match mask {
            None => {
                let s = feature_map(g, o, &trace.mask)?;
                n += d_ff;
                let gs = surrogate_apply(g, s, surrogate)?;
                g.sum_all(gs)?
            }
            Some(m) => {
                n += valid * d_ff;
                let go = surrogate_apply(g, o, surrogate)?;
                let kept = g.mul(go, m)?;
                g.sum_all(kept)?
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("nonempty trace");
    g.scale(total, 1.0 / n as f64)
}

/// `(1/n)·Σ_l Σ_i g(s_{l,i})` with `n = L·d_ff`, or the per-token variant
/// summing over every unmasked entry of each `O_l`.
pub fn density_loss(
    g: &mut Graph,
    trace: &ActivationTrace,
    granularity: Granularity,
    surrogate: &SurrogateConfig,
) -> Result<Var> {
    layer_terms(g, trace, None, granularity, surrogate)
}

/// As [`density_loss`] with layer `l`'s activations scaled by `S_l` first.
pub fn ada_density_loss(
    g: &mut Graph,
    trace: &ActivationTrace,
    s: Var,
    granularity: Granularity,
    surrogate: &SurrogateConfig,
) -> Result<Var> {
    let shape = g.shape(s);
    if shape != [trace.len()] {
        return Err(Error::dim(
            "ada_density_loss",
            format!("S of shape {shape:?} for {} layers", trace.len()),
        ));
    }
    layer_terms(g, trace, Some(s), granularity, surrogate)
}

/// `task + α·density`. At `α = 0` the density branch is left out of the
/// loss entirely.
pub fn total_loss(g: &mut Graph, task: Var, density: Var, alpha: f64) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(task);
    }
    let weighted = g.scale(density, alpha)?;
    g.add(task, weighted)
}

/// Layerwise scales `S ∈ [0,1]^L` applied to MLP block outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub values: Vec<f64>,
    pub init_mean: f64,
    pub init_std: f64,
    /// Layers with `S_l ≤ tau` are skipped at inference.
    pub tau: f64,
    pub trainable: bool,
}

pub const DEFAULT_INIT_MEAN: f64 = 0.80;
pub const DEFAULT_INIT_STD: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 1e-3;

impl AdaptiveWeights {
    /// Every layer at `value`, frozen.
    pub fn constant(layers: usize, value: f64) -> Self {
        AdaptiveWeights {
            values: vec![value; layers],
            init_mean: value,
            init_std: 0.0,
            tau: DEFAULT_TAU,
            trainable: false,
        }
    }

    pub fn clamp(&mut self) {
        self.values = clamp_adaptive_weights(&self.values);
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.tau) {
            return Err(Error::config(format!("skip threshold {} outside [0, 0.5)", self.tau)));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("adaptive weight {v} outside [0,1]")));
        }
        Ok(())
    }
}

/// `S_l = clamp(0.80 + N(0, 0.05²), 0, 1)`, seeded and trainable.
pub fn init_adaptive_weights(layers: usize, seed: u64) -> Result<AdaptiveWeights> {
    init_adaptive_weights_with(layers, DEFAULT_INIT_MEAN, DEFAULT_INIT_STD, seed)
}

/// `init_std = 0` gives the zero-noise initialization.
pub fn init_adaptive_weights_with(layers: usize, mean: f64, std: f64, seed: u64) -> Result<AdaptiveWeights> {
    if layers == 0 {
        return Err(Error::config("adaptive weights need at least one layer"));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::config(format!("adaptive init std {std} must be nonnegative")));
    }
    let raw: Vec<f64> = if std == 0.0 {
        vec![mean; layers]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        (0..layers).map(|_| dist.sample(&mut rng)).collect()
    };
    Ok(AdaptiveWeights {
        values: clamp_adaptive_weights(&raw),
        init_mean: mean,
        init_std: std,
        tau: DEFAULT_TAU,
        trainable: true,
    })
}

/// Projection onto `[0,1]`.
pub fn clamp_adaptive_weights(s: &[f64]) -> Vec<f64> {
    s.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}
