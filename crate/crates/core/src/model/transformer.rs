use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::config::{Activation, MlpKind, ModelConfig};
use super::params::{normal_tensor, Bindings, ParamStore};
use super::trace::{ActivationTrace, LayerTrace};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::objective::AdaptiveWeights;
use crate::peft::{adapter_forward, lora_delta, prefix_inject, prompt_prepend, LoraSite, LoraVars, PeftAttachment, PeftConfig};
use crate::tensor::Tensor;

/// Name of the adaptive-weight leaf in [`Bindings`].
pub const ADAPTIVE_PARAM: &str = "ada.s";

const MASK_NEG: f64 = -1e9;

/// Encoder classifier parameters Θ plus the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub(crate) fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Name of the pruned first MLP projection (`W1`, or `Ws` for gated blocks).
pub fn first_projection_name(config: &ModelConfig, layer: usize) -> String {
    match config.mlp_kind {
        MlpKind::Standard => layer_param(layer, "mlp.w1"),
        MlpKind::Gated => layer_param(layer, "mlp.ws"),
    }
}

impl TransformerModel {
    /// Seeded initialization: weights and embeddings from `N(0, init_std²)`,
    /// biases zero, layer-norm gains one. Every parameter starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let (d, f) = (config.d_model, config.d_ff);
        let mut params = ParamStore::new();
        let mut w = |params: &mut ParamStore, name: String, shape: &[usize]| {
            params.insert(name, normal_tensor(&mut rng, shape, std), true);
        };
        w(&mut params, "embed.token".into(), &[config.vocab_size, d]);
        w(&mut params, "embed.position".into(), &[config.max_seq_len, d]);
        for l in 0..config.layers {
            for site in ["q", "k", "v", "o"] {
                w(&mut params, layer_param(l, &format!("attn.{site}.weight")), &[d, d]);
            }
            match config.mlp_kind {
                MlpKind::Standard => {
                    w(&mut params, layer_param(l, "mlp.w1"), &[d, f]);
                    w(&mut params, layer_param(l, "mlp.w2"), &[f, d]);
                }
                MlpKind::Gated => {
                    w(&mut params, layer_param(l, "mlp.ws"), &[f, d]);
                    w(&mut params, layer_param(l, "mlp.we"), &[f, d]);
                    w(&mut params, layer_param(l, "mlp.wo"), &[d, f]);
                }
            }
        }
        w(&mut params, "head.weight".into(), &[d, config.num_classes]);
        for l in 0..config.layers {
            for site in ["q", "k", "v", "o"] {
                params.insert(layer_param(l, &format!("attn.{site}.bias")), Tensor::zeros(&[d]), true);
            }
            for ln in ["ln1", "ln2"] {
                params.insert(layer_param(l, &format!("{ln}.gamma")), Tensor::ones(&[d]), true);
                params.insert(layer_param(l, &format!("{ln}.beta")), Tensor::zeros(&[d]), true);
            }
            if config.mlp_kind == MlpKind::Standard {
                params.insert(layer_param(l, "mlp.b1"), Tensor::zeros(&[f]), true);
                params.insert(layer_param(l, "mlp.b2"), Tensor::zeros(&[d]), true);
            }
        }
        params.insert("final_ln.gamma", Tensor::ones(&[d]), true);
        params.insert("final_ln.beta", Tensor::zeros(&[d]), true);
        params.insert("head.bias", Tensor::zeros(&[config.num_classes]), true);
        Ok(TransformerModel { config, params })
    }

    /// Freezes Θ and leaves only the classifier head trainable.
    pub fn freeze_backbone(&mut self) {
        self.params.set_all_trainable(false);
        self.params.set_trainable_prefix("head.", true);
    }

    /// Checks that every parameter has the shape the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = TransformerModel::new(self.config.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter arrays, found {}",
                reference.params.len(),
                self.params.len()
            )));
        }
        for (name, p) in reference.params.iter() {
            let actual = self.params.tensor(name)?;
            if actual.shape() != p.value.shape() {
                return Err(Error::dim(
                    "model parameters",
                    format!("`{name}` has shape {:?}, expected {:?}", actual.shape(), p.value.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Per-pass switches for [`model_forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub attachment: Option<&'a PeftAttachment>,
    /// Layerwise scales `S`; one entry per layer.
    pub adaptive: Option<&'a AdaptiveWeights>,
    /// Layers whose MLP branch is removed from the computation.
    pub skip: Option<&'a [bool]>,
    /// Dropout is active only when a seed is supplied.
    pub dropout_seed: Option<u64>,
    pub trace: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `B × num_classes`
    pub logits: Var,
    pub trace: Option<ActivationTrace>,
    pub bindings: Bindings,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Binds parameters lazily and hosts the building blocks of one pass.
pub struct ForwardContext<'a> {
    pub model: &'a TransformerModel,
    pub attachment: Option<&'a PeftAttachment>,
    pub dropout_seed: Option<u64>,
    pub bindings: Bindings,
}

impl<'a> ForwardContext<'a> {
    pub fn new(model: &'a TransformerModel, attachment: Option<&'a PeftAttachment>, dropout_seed: Option<u64>) -> Self {
        ForwardContext {
            model,
            attachment,
            dropout_seed,
            bindings: Bindings::new(),
        }
    }

    fn bind(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        match self.attachment {
            Some(a) if name.starts_with("peft.") => self.bindings.bind_from(g, &a.params, name),
            _ => self.bindings.bind_from(g, &self.model.params, name),
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.model.config.layers {
            return Err(Error::Range {
                what: "layer",
                index: layer,
                len: self.model.config.layers,
            });
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, site: u64) -> Result<Var> {
        let p = self.model.config.dropout_p;
        match self.dropout_seed {
            Some(seed) if p > 0.0 => g.dropout(x, p, splitmix(seed ^ splitmix(site))),
            _ => Ok(x),
        }
    }

    fn layer_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let n = g.layer_norm(x, self.model.config.layer_norm_eps)?;
        let gamma = self.bind(g, &format!("{prefix}.gamma"))?;
        let beta = self.bind(g, &format!("{prefix}.beta"))?;
        let scaled = g.mul(n, gamma)?;
        g.add(scaled, beta)
    }

    fn projection(&mut self, g: &mut Graph, x: Var, layer: usize, site: LoraSite) -> Result<Var> {
        let s = site.as_str();
        let w = self.bind(g, &layer_param(layer, &format!("attn.{s}.weight")))?;
        let b = self.bind(g, &layer_param(layer, &format!("attn.{s}.bias")))?;
        let mut y = g.matmul_t(x, w)?;
        if let Some(att) = self.attachment {
            if let Some(scale) = att.lora_scale() {
                if att.lora_sites().contains(&site) {
                    let base = format!("peft.lora.layers.{layer}.{s}");
                    let lora = LoraVars {
                        a: self.bind(g, &format!("{base}.a"))?,
                        b: self.bind(g, &format!("{base}.b"))?,
                        scale,
                    };
                    let delta = lora_delta(g, x, &lora)?;
                    y = g.add(y, delta)?;
                }
            }
        }
        g.add(y, b)
    }

    /// Multi-head self-attention over `x` (`B × T × d_model`) with key mask
    /// `mask` (`B × T`).
    pub fn attention(&mut self, g: &mut Graph, x: Var, mask: &Tensor, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || mask.shape() != &shape[..2] {
            return Err(Error::dim("attention", format!("input {shape:?} with mask {:?}", mask.shape())));
        }
        let (b, t) = (shape[0], shape[1]);
        let q = self.projection(g, x, layer, LoraSite::Q)?;
        let k = self.projection(g, x, layer, LoraSite::K)?;
        let v = self.projection(g, x, layer, LoraSite::V)?;
        let bias: Vec<f64> = mask.data().iter().map(|&m| if m != 0.0 { 0.0 } else { MASK_NEG }).collect();
        let bias = g.constant(Tensor::from_parts(vec![b, 1, t], bias));
        let dh = self.model.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.model.config.heads);
        for h in 0..self.model.config.heads {
            let qh = g.slice(q, 2, h * dh, dh)?;
            let kh = g.slice(k, 2, h * dh, dh)?;
            let vh = g.slice(v, 2, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let scores = g.add(scores, bias)?;
            let probs = g.softmax(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
        self.projection(g, joined, layer, LoraSite::O)
    }

    /// MLP block of `layer`. Returns the block output `Y` and the activation
    /// pattern `O` captured before the second projection or gating product.
    pub fn mlp_forward(&mut self, g: &mut Graph, x: Var, layer: usize) -> Result<(Var, Var)> {
        self.check_layer(layer)?;
        let cfg = &self.model.config;
        let (kind, act) = (cfg.mlp_kind, cfg.activation);
        let activate = |g: &mut Graph, z: Var| match act {
            Activation::Relu => g.relu(z),
            Activation::GeluTanh => g.gelu_tanh(z),
        };
        match kind {
            MlpKind::Standard => {
                let w1 = self.bind(g, &layer_param(layer, "mlp.w1"))?;
                let b1 = self.bind(g, &layer_param(layer, "mlp.b1"))?;
                let w2 = self.bind(g, &layer_param(layer, "mlp.w2"))?;
                let b2 = self.bind(g, &layer_param(layer, "mlp.b2"))?;
                let z = g.matmul(x, w1)?;
                let z = g.add(z, b1)?;
                let o = activate(g, z)?;
                let y = g.matmul(o, w2)?;
                Ok((g.add(y, b2)?, o))
            }
            MlpKind::Gated => {
                let ws = self.bind(g, &layer_param(layer, "mlp.ws"))?;
                let we = self.bind(g, &layer_param(layer, "mlp.we"))?;
                let wo = self.bind(g, &layer_param(layer, "mlp.wo"))?;
                let zs = g.matmul_t(x, ws)?;
                let o = activate(g, zs)?;
                let e = g.matmul_t(x, we)?;
                let gated = g.mul(o, e)?;
                Ok((g.matmul_t(gated, wo)?, o))
            }
        }
    }

    /// One pre-norm encoder block. `scale` multiplies the MLP branch (after
    /// the adapter, before dropout); `skipped` drops the branch entirely.
    pub fn encoder_layer(
        &mut self,
        g: &mut Graph,
        x: Var,
        mask: &Tensor,
        layer: usize,
        scale: Option<Var>,
        skipped: bool,
    ) -> Result<(Var, LayerTrace)> {
        self.check_layer(layer)?;
        let site = 16 * layer as u64;
        let a = self.layer_norm(g, x, &layer_param(layer, "ln1"))?;
        let att = self.attention(g, a, mask, layer)?;
        let att = self.dropout(g, att, site + 1)?;
        let h = g.add(x, att)?;
        if skipped {
            let s = g.shape(x).to_vec();
            let pattern = g.constant(Tensor::zeros(&[s[0], s[1], self.model.config.d_ff]));
            return Ok((
                h,
                LayerTrace {
                    pattern,
                    mlp_input: None,
                    skipped: true,
                },
            ));
        }
        let m_in = self.layer_norm(g, h, &layer_param(layer, "ln2"))?;
        let (mut y, pattern) = self.mlp_forward(g, m_in, layer)?;
        if let Some(att) = self.attachment {
            if let PeftConfig::Adapter { nonlinearity, .. } = att.config {
                let base = format!("peft.adapter.layers.{layer}");
                let down = self.bind(g, &format!("{base}.down"))?;
                let up = self.bind(g, &format!("{base}.up"))?;
                y = adapter_forward(g, y, down, up, nonlinearity)?;
            }
        }
        if let Some(s) = scale {
            y = g.mul(y, s)?;
        }
        let y = self.dropout(g, y, site + 2)?;
        let out = g.add(h, y)?;
        Ok((
            out,
            LayerTrace {
                pattern,
                mlp_input: Some(m_in),
                skipped: false,
            },
        ))
    }
}

/// Runs the MLP block of `layer` on `x` outside a full pass.
pub fn mlp_forward(g: &mut Graph, model: &TransformerModel, x: Var, layer: usize) -> Result<(Var, Var)> {
    ForwardContext::new(model, None, None).mlp_forward(g, x, layer)
}

/// Full classifier pass: embeddings, optional prompt, `L` encoder blocks
/// (with optional prefix rows), final norm and first-position readout.
pub fn model_forward(g: &mut Graph, model: &TransformerModel, batch: &Batch, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (b, t) = (batch.batch_size, batch.seq_len);
    if batch.token_ids.len() != b * t || batch.mask.len() != b * t {
        return Err(Error::dim("model_forward", format!("batch buffers do not match {b}×{t}")));
    }
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Range {
            what: "token id",
            index: bad,
            len: cfg.vocab_size,
        });
    }
    if t > cfg.max_seq_len {
        return Err(Error::Length(format!("sequence of {t} tokens exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let virtual_rows = opts.attachment.map_or(0, |a| a.config.virtual_tokens());
    if virtual_rows + t > cfg.max_seq_len {
        return Err(Error::Length(format!(
            "{virtual_rows} virtual tokens plus {t} tokens exceed max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(a) = opts.adaptive {
        if a.values.len() != cfg.layers {
            return Err(Error::dim("model_forward", format!("{} adaptive weights for {} layers", a.values.len(), cfg.layers)));
        }
    }
    if let Some(s) = opts.skip {
        if s.len() != cfg.layers {
            return Err(Error::dim("model_forward", format!("skip plan of {} for {} layers", s.len(), cfg.layers)));
        }
    }

    let mut ctx = ForwardContext::new(model, opts.attachment, opts.dropout_seed);
    let token_table = ctx.bind(g, "embed.token")?;
    let pos_table = ctx.bind(g, "embed.position")?;
    let tok = g.embedding(token_table, &batch.token_ids, &[b, t])?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.embedding(pos_table, &positions, &[t])?;
    let x = g.add(tok, pos)?;
    let mut x = ctx.dropout(g, x, 0)?;
    let mut mask = batch.mask_tensor();

    let mut readout = 0;
    let mut prefix = None;
    if let Some(att) = opts.attachment {
        match att.config {
            PeftConfig::Prompt { length } => {
                let prompt = ctx.bind(g, "peft.prompt.embedding")?;
                let (nx, nm) = prompt_prepend(g, x, &mask, prompt, cfg.max_seq_len)?;
                x = nx;
                mask = nm;
                readout = length;
            }
            PeftConfig::Prefix { length } => {
                prefix = Some((ctx.bind(g, "peft.prefix.embedding")?, length));
            }
            _ => {}
        }
    }

    let s_var = opts
        .adaptive
        .map(|a| g.leaf(Tensor::from_parts(vec![cfg.layers], a.values.clone()), a.trainable));
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut trace_mask = mask.clone();
    for l in 0..cfg.layers {
        let scale = match s_var {
            Some(s) => Some(g.slice(s, 0, l, 1)?),
            None => None,
        };
        let skipped = opts.skip.is_some_and(|s| s[l]);
        match prefix {
            Some((pv, p)) => {
                let (xi, mi) = prefix_inject(g, x, &mask, l, pv)?;
                let (out, lt) = ctx.encoder_layer(g, xi, &mi, l, scale, skipped)?;
                let cur = g.shape(x)[1];
                x = g.slice(out, 1, p, cur)?;
                trace_mask = mi;
                layers.push(lt);
            }
            None => {
                let (out, lt) = ctx.encoder_layer(g, x, &mask, l, scale, skipped)?;
                x = out;
                layers.push(lt);
            }
        }
    }

    let x = ctx.layer_norm(g, x, "final_ln")?;
    let cls = g.slice(x, 1, readout, 1)?;
    let cls = g.reshape(cls, &[b, cfg.d_model])?;
    let hw = ctx.bind(g, "head.weight")?;
    let hb = ctx.bind(g, "head.bias")?;
    let logits = g.matmul(cls, hw)?;
    let logits = g.add(logits, hb)?;
    let mut bindings = ctx.bindings;
    if let Some(s) = s_var {
        bindings.insert(ADAPTIVE_PARAM, s);
    }
    Ok(ForwardOutput {
        logits,
        trace: opts.trace.then_some(ActivationTrace { layers, mask: trace_mask }),
        bindings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::AdaptiveWeights;
    use crate::peft::PeftConfig;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            vocab_size: 20,
            max_seq_len: 16,
            dropout_p: 0.0,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn small_batch() -> Batch {
        Batch::from_sequences(&[vec![2, 5, 7, 9], vec![2, 11, 3]], &[0, 1], 0).unwrap()
    }

    fn logits(model: &TransformerModel, opts: &ForwardOptions<'_>) -> Vec<f64> {
        let mut g = Graph::new();
        let out = model_forward(&mut g, model, &small_batch(), opts).unwrap();
        g.value(out.logits).data().to_vec()
    }

    fn set(model: &mut TransformerModel, name: &str, t: Tensor) {
        model.params.get_mut(name).unwrap().value = t;
    }

    #[test]
    fn identity_standard_mlp() {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 2,
            d_ff: 3,
            heads: 1,
            ..small_config()
        };
        let mut model = TransformerModel::new(cfg, 0).unwrap();
        set(&mut model, "layers.0.mlp.w1", Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        set(&mut model, "layers.0.mlp.w2", Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let (y, o) = mlp_forward(&mut g, &model, x, 0).unwrap();
        assert_eq!(g.value(o).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gated_zero_input() {
        let cfg = ModelConfig {
            mlp_kind: MlpKind::Gated,
            activation: Activation::GeluTanh,
            ..small_config()
        };
        let model = TransformerModel::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8]));
        let (y, o) = mlp_forward(&mut g, &model, x, 1).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standard_mlp_matches_matmul_oracle() {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 2,
            d_ff: 3,
            heads: 1,
            ..small_config()
        };
        let mut model = TransformerModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        set(&mut model, "layers.0.mlp.b1", Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap());
        set(&mut model, "layers.0.mlp.b2", Tensor::vector(vec![0.05, -0.05]).unwrap());
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, 1, 2], x.clone()).unwrap());
        let (y, _) = mlp_forward(&mut g, &model, xv, 0).unwrap();
        let p = |n: &str| model.params.tensor(n).unwrap().data().to_vec();
        let (w1, b1, w2, b2) = (p("layers.0.mlp.w1"), p("layers.0.mlp.b1"), p("layers.0.mlp.w2"), p("layers.0.mlp.b2"));
        let hidden: Vec<f64> = (0..3).map(|j| (x[0] * w1[j] + x[1] * w1[3 + j] + b1[j]).max(0.0)).collect();
        for i in 0..2 {
            let expect: f64 = (0..3).map(|j| hidden[j] * w2[j * 2 + i]).sum::<f64>() + b2[i];
            assert!((g.value(y).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_out_of_range() {
        let model = TransformerModel::new(small_config(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 8]));
        assert!(matches!(mlp_forward(&mut g, &model, x, 2), Err(Error::Range { .. })));
    }

    #[test]
    fn unit_adaptive_weights_are_identity() {
        let model = TransformerModel::new(small_config(), 2).unwrap();
        let base = logits(&model, &ForwardOptions::default());
        let ada = AdaptiveWeights::constant(2, 1.0);
        let scaled = logits(
            &model,
            &ForwardOptions {
                adaptive: Some(&ada),
                ..Default::default()
            },
        );
        assert_eq!(base, scaled);
    }

    #[test]
    fn zero_weight_equals_structural_skip() {
        let model = TransformerModel::new(small_config(), 3).unwrap();
        for l in 0..2 {
            let mut ada = AdaptiveWeights::constant(2, 0.7);
            ada.values[l] = 0.0;
            let mut skip = vec![false; 2];
            skip[l] = true;
            let scaled = logits(
                &model,
                &ForwardOptions {
                    adaptive: Some(&ada),
                    ..Default::default()
                },
            );
            let skipped = logits(
                &model,
                &ForwardOptions {
                    adaptive: Some(&ada),
                    skip: Some(&skip),
                    ..Default::default()
                },
            );
            assert_eq!(scaled, skipped);
        }
    }

    #[test]
    fn trace_has_one_entry_per_layer() {
        let model = TransformerModel::new(small_config(), 4).unwrap();
        let mut g = Graph::new();
        let out = model_forward(
            &mut g,
            &model,
            &small_batch(),
            &ForwardOptions {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.len(), 2);
        for p in trace.pattern_values(&g) {
            assert_eq!(p.shape(), &[2, 4, 12]);
        }
    }

    #[test]
    fn overlong_sequence_is_length_error() {
        let model = TransformerModel::new(small_config(), 0).unwrap();
        let batch = Batch::from_sequences(&[vec![1; 17]], &[0], 0).unwrap();
        let mut g = Graph::new();
        let res = model_forward(&mut g, &model, &batch, &ForwardOptions::default());
        assert!(matches!(res, Err(Error::Length(_))));
    }

    #[test]
    fn zero_init_attachments_leave_logits_unchanged() {
        let cfg = small_config();
        let model = TransformerModel::new(cfg.clone(), 6).unwrap();
        let base = logits(&model, &ForwardOptions::default());
        for peft in [
            PeftConfig::default(),
            PeftConfig::Adapter {
                reduction_factor: 4,
                nonlinearity: Activation::Relu,
            },
        ] {
            let att = PeftAttachment::new(&cfg, peft, 7).unwrap();
            let attached = logits(
                &model,
                &ForwardOptions {
                    attachment: Some(&att),
                    ..Default::default()
                },
            );
            assert_eq!(base, attached);
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let cfg = ModelConfig {
            dropout_p: 0.3,
            ..small_config()
        };
        let model = TransformerModel::new(cfg, 8).unwrap();
        let opts = ForwardOptions {
            dropout_seed: Some(42),
            ..Default::default()
        };
        assert_eq!(logits(&model, &opts), logits(&model, &opts));
        assert_ne!(logits(&model, &opts), logits(&model, &ForwardOptions::default()));
    }

    #[test]
    fn check_shapes_accepts_fresh_model() {
        TransformerModel::new(small_config(), 0).unwrap().check_shapes().unwrap();
    }
}
