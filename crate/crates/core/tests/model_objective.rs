use deft_core::autodiff::Graph;
use deft_core::data::PAD_ID;
use deft_core::model::{
    model_forward, Activation, ActivationTrace, Batch, ForwardOptions, LayerTrace, MlpKind, ModelConfig,
    TransformerModel, ADAPTIVE_PARAM,
};
use deft_core::objective::{
    ada_density_loss, density_loss, surrogate_apply, AdaptiveWeights, Granularity, SurrogateConfig, SurrogateKind,
};
use deft_core::optim::{AdamW, OptimizerConfig};
use deft_core::peft::{PeftAttachment, PeftConfig};
use deft_core::Tensor;
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        vocab_size: 32,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

fn batch() -> Batch {
    Batch::from_sequences(&[vec![2, 5, 9, 14, 3], vec![2, 7, 3]], &[0, 1], PAD_ID).unwrap()
}

fn traced(model: &TransformerModel, attachment: Option<&PeftAttachment>) -> (Graph, ActivationTrace) {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        attachment,
        trace: true,
        ..Default::default()
    };
    let out = model_forward(&mut g, model, &batch(), &opts).unwrap();
    (g, out.trace.unwrap())
}

#[test]
fn trace_has_one_pattern_per_layer_with_d_ff_channels() {
    for kind in [MlpKind::Standard, MlpKind::Gated] {
        let c = ModelConfig {
            layers: 3,
            mlp_kind: kind,
            activation: Activation::GeluTanh,
            ..cfg()
        };
        let model = TransformerModel::new(c.clone(), 1).unwrap();
        let (g, trace) = traced(&model, None);
        assert_eq!(trace.len(), 3);
        for p in trace.pattern_values(&g) {
            assert_eq!(p.shape()[2], c.d_ff);
        }
    }
}

#[test]
fn virtual_tokens_keep_channel_count() {
    let c = cfg();
    let model = TransformerModel::new(c.clone(), 1).unwrap();
    for pc in [PeftConfig::Prefix { length: 3 }, PeftConfig::Prompt { length: 3 }] {
        let att = PeftAttachment::new(&c, pc, 2).unwrap();
        let (g, trace) = traced(&model, Some(&att));
        for p in trace.pattern_values(&g) {
            assert_eq!(p.shape()[2], c.d_ff);
        }
    }
}

#[test]
fn relu_density_is_below_full() {
    let model = TransformerModel::new(cfg(), 4).unwrap();
    let (g, trace) = traced(&model, None);
    for p in trace.pattern_values(&g) {
        assert!(p.data().contains(&0.0));
    }
}

#[test]
fn gelu_saturates_to_exact_zero_for_very_negative_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-20.0, -25.0, -100.0]).unwrap());
    let y = g.gelu_tanh(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let x = g.constant(Tensor::vector(vec![-1.0, 0.5]).unwrap());
    let y = g.gelu_tanh(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v != 0.0));
}

#[test]
fn one_step_on_attachment_leaves_backbone_unchanged() {
    let c = cfg();
    let mut model = TransformerModel::new(c.clone(), 0).unwrap();
    model.freeze_backbone();
    model.params.set_trainable_prefix("head.", false);
    let mut att = PeftAttachment::new(&c, PeftConfig::default(), 1).unwrap();
    let before = model.params.checksums();
    let mut g = Graph::new();
    let opts = ForwardOptions {
        attachment: Some(&att),
        ..Default::default()
    };
    let b = batch();
    let out = model_forward(&mut g, &model, &b, &opts).unwrap();
    let loss = g.cross_entropy(out.logits, &b.labels).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut opt = AdamW::new(0.1, &OptimizerConfig::default());
    opt.begin_step();
    let mut stepped = 0;
    for (name, var) in out.bindings.iter() {
        let Some(gr) = grads.get(var) else { continue };
        if let Ok(p) = att.params.get_mut(name) {
            opt.update(name, p.value.data_mut(), gr).unwrap();
            stepped += 1;
        } else {
            assert!(!model.params.get(name).unwrap().trainable, "{name} received a gradient");
        }
    }
    assert!(stepped > 0);
    assert_eq!(model.params.checksums(), before);
}

fn surrogate(kind: SurrogateKind, x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(x.to_vec()).unwrap());
    let y = surrogate_apply(&mut g, v, &SurrogateConfig { kind, beta: 20.0, epsilon: 1e-7 }).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn surrogates_are_monotone_in_magnitude(mut xs in prop::collection::vec(0.0f64..50.0, 2..40)) {
        xs.sort_by(f64::total_cmp);
        for kind in [SurrogateKind::Tanh, SurrogateKind::L0Hat, SurrogateKind::Sigmoid, SurrogateKind::L1] {
            let y = surrogate(kind, &xs);
            prop_assert!(y.windows(2).all(|w| w[0] <= w[1]), "{:?} not monotone", kind);
            if kind != SurrogateKind::L1 {
                prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        prop_assert_eq!(surrogate(SurrogateKind::L0Hat, &neg), surrogate(SurrogateKind::L0Hat, &xs));
        prop_assert_eq!(surrogate(SurrogateKind::L1, &neg), surrogate(SurrogateKind::L1, &xs));
    }

    #[test]
    fn density_loss_lies_in_unit_interval(
        data in prop::collection::vec(-3.0f64..3.0, 2 * 2 * 3 * 4),
        per_token in any::<bool>(),
    ) {
        let gran = if per_token { Granularity::PerToken } else { Granularity::FeatureMap };
        for kind in [SurrogateKind::Tanh, SurrogateKind::L0Hat, SurrogateKind::Sigmoid] {
            let mut g = Graph::new();
            let layers = (0..2)
                .map(|l| {
                    let raw = g.constant(Tensor::new(vec![2, 3, 4], data[l * 24..(l + 1) * 24].to_vec()).unwrap());
                    LayerTrace { pattern: g.relu(raw).unwrap(), mlp_input: None, skipped: false }
                })
                .collect();
            let trace = ActivationTrace {
                layers,
                mask: Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            };
            let surr = SurrogateConfig { kind, beta: 20.0, epsilon: 1e-7 };
            let d = density_loss(&mut g, &trace, gran, &surr).unwrap();
            let v = g.value(d).data()[0];
            prop_assert!((0.0..=1.0).contains(&v), "{:?}: {}", kind, v);
        }
    }
}

#[test]
fn density_gradient_reaches_backbone_but_not_head() {
    let c = cfg();
    let mut model = TransformerModel::new(c.clone(), 2).unwrap();
    model.params.set_all_trainable(true);
    let mut g = Graph::new();
    let opts = ForwardOptions {
        trace: true,
        ..Default::default()
    };
    let out = model_forward(&mut g, &model, &batch(), &opts).unwrap();
    let trace = out.trace.unwrap();
    let surr = SurrogateConfig::with_kind(SurrogateKind::Tanh);
    let d = density_loss(&mut g, &trace, Granularity::FeatureMap, &surr).unwrap();
    let grads = g.backward(d).unwrap();
    let norm = |name: &str| -> f64 {
        let v = out.bindings.get(name).unwrap();
        grads.get(v).map_or(0.0, |gr| gr.iter().map(|x| x.abs()).sum())
    };
    assert!(norm("layers.0.mlp.w1") > 0.0);
    assert!(norm("embed.token") > 0.0);
    assert_eq!(norm("head.weight"), 0.0);
    assert_eq!(norm("head.bias"), 0.0);
    assert_eq!(norm("final_ln.gamma"), 0.0);
}

#[test]
fn shrinking_adaptive_weight_never_raises_density_term() {
    let model = TransformerModel::new(cfg(), 3).unwrap();
    let surr = SurrogateConfig::with_kind(SurrogateKind::Tanh);
    for seed in 0..5 {
        for gran in [Granularity::FeatureMap, Granularity::PerToken] {
            let ada = AdaptiveWeights {
                values: vec![0.3 + 0.1 * seed as f64, 0.9],
                init_mean: 0.8,
                init_std: 0.0,
                tau: 1e-3,
                trainable: true,
            };
            let mut g = Graph::new();
            let opts = ForwardOptions {
                adaptive: Some(&ada),
                trace: true,
                ..Default::default()
            };
            let out = model_forward(&mut g, &model, &batch(), &opts).unwrap();
            let trace = out.trace.unwrap();
            let s = out.bindings.get(ADAPTIVE_PARAM).unwrap();
            let d = ada_density_loss(&mut g, &trace, s, gran, &surr).unwrap();
            let grads = g.backward(d).unwrap();
            assert!(grads.get(s).unwrap().iter().all(|&v| v >= 0.0));
        }
    }
}
