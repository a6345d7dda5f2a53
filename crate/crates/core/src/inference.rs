//! Skip-plan inference with MAC accounting, runtime and memory estimates.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{DensityAccumulator, DensityReport, MacCounts, MacSite};
use crate::model::{model_forward, Batch, ForwardOptions, MlpKind, ModelConfig, TransformerModel};
use crate::objective::AdaptiveWeights;
use crate::peft::{PeftAttachment, PeftConfig};
use crate::tensor::Tensor;

const BYTES_PER_VALUE: u64 = 8;

/// MLP blocks removed from the inference path, plus the scales applied to
/// the surviving ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipPlan {
    pub skipped_layers: BTreeSet<usize>,
    pub tau: f64,
    /// `S_l` for every layer; skipped entries are kept for reference.
    pub scales: Vec<f64>,
}

impl SkipPlan {
    pub fn layers(&self) -> usize {
        self.scales.len()
    }

    pub fn flags(&self) -> Vec<bool> {
        (0..self.layers()).map(|l| self.skipped_layers.contains(&l)).collect()
    }

    fn adaptive(&self) -> AdaptiveWeights {
        AdaptiveWeights {
            values: self.scales.clone(),
            init_mean: 0.0,
            init_std: 0.0,
            tau: self.tau,
            trainable: false,
        }
    }
}

/// Skips layer `l` iff `S_l ≤ τ`.
pub fn build_skip_plan(s: &AdaptiveWeights) -> SkipPlan {
    build_skip_plan_with(&s.values, s.tau)
}

pub fn build_skip_plan_with(s: &[f64], tau: f64) -> SkipPlan {
    SkipPlan {
        skipped_layers: s.iter().enumerate().filter(|(_, &v)| v <= tau).map(|(l, _)| l).collect(),
        tau,
        scales: s.to_vec(),
    }
}

/// Counted MACs plus runtime and memory for one inference run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacTrace {
    pub counts: MacCounts,
    /// Wall-clock seconds spent in forward passes.
    pub duration_secs: f64,
    /// Parameter bytes touched plus peak activation bytes.
    pub memory_bytes: u64,
    pub examples: usize,
}

impl MacTrace {
    pub fn merge(&mut self, other: &MacTrace) {
        self.counts.merge(&other.counts);
        self.duration_secs += other.duration_secs;
        self.memory_bytes = self.memory_bytes.max(other.memory_bytes);
        self.examples += other.examples;
    }
}

/// MACs of one forward pass. `patterns[l]` is `O_l` and `mask` the rows the
/// blocks processed (`B × T'`), both as produced by a traced forward.
pub fn count_macs(
    cfg: &ModelConfig,
    attachment: Option<&PeftAttachment>,
    patterns: &[&Tensor],
    mask: &Tensor,
    skipped: &[bool],
    threshold: f64,
) -> Result<MacCounts> {
    if patterns.len() != cfg.layers || skipped.len() != cfg.layers {
        return Err(Error::dim(
            "count_macs",
            format!("{} patterns, {} skip flags for {} layers", patterns.len(), skipped.len(), cfg.layers),
        ));
    }
    let ms = mask.shape();
    if ms.len() != 2 {
        return Err(Error::dim("count_macs", format!("mask shape {ms:?}")));
    }
    let (b, t) = (ms[0], ms[1]);
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let rows: Vec<u64> = mask
        .data()
        .chunks(t)
        .map(|r| r.iter().filter(|&&m| m != 0.0).count() as u64)
        .collect();
    let n: u64 = rows.iter().sum();
    let n_sq: u64 = rows.iter().map(|r| r * r).sum();
    let (lora_per_row, adapter_per_row) = match attachment.map(|a| &a.config) {
        Some(PeftConfig::Lora { rank, sites, .. }) => (sites.len() as u64 * 2 * d * *rank as u64, 0),
        Some(PeftConfig::Adapter { reduction_factor, .. }) => (0, 2 * d * (cfg.d_model / reduction_factor).max(1) as u64),
        _ => (0, 0),
    };
    let mut c = MacCounts::default();
    for l in 0..cfg.layers {
        let layer = Some(l);
        for site in [MacSite::AttnQ, MacSite::AttnK, MacSite::AttnV, MacSite::AttnO] {
            c.add(layer, site, n * d * d, 0);
        }
        c.add(layer, MacSite::AttnScores, n_sq * d, 0);
        c.add(layer, MacSite::AttnContext, n_sq * d, 0);
        if lora_per_row > 0 {
            c.add(layer, MacSite::Lora, n * lora_per_row, 0);
        }
        if skipped[l] {
            continue;
        }
        c.add(layer, MacSite::MlpIn, n * d * f, 0);
        if cfg.mlp_kind == MlpKind::Gated {
            c.add(layer, MacSite::MlpGate, n * d * f, 0);
        }
        let p = patterns[l];
        if p.shape() != [b, t, cfg.d_ff] {
            return Err(Error::dim("count_macs", format!("pattern {:?} for mask {ms:?}", p.shape())));
        }
        let mut zeros = 0u64;
        for (row, &m) in p.data().chunks(cfg.d_ff).zip(mask.data()) {
            if m != 0.0 {
                zeros += row.iter().filter(|v| v.abs() <= threshold).count() as u64;
            }
        }
        c.add(layer, MacSite::MlpOut, n * f * d, zeros * d);
        if adapter_per_row > 0 {
            c.add(layer, MacSite::Adapter, n * adapter_per_row, 0);
        }
    }
    c.add(None, MacSite::Head, b as u64 * d * cfg.num_classes as u64, 0);
    Ok(c)
}

fn mlp_param_prefixes(layer: usize) -> [String; 2] {
    [format!("layers.{layer}.mlp."), format!("peft.adapter.layers.{layer}.")]
}

/// Parameter bytes touched by a plan: everything except the MLP (and
/// adapter) arrays of skipped layers.
pub fn parameter_bytes(model: &TransformerModel, attachment: Option<&PeftAttachment>, skipped: &[bool]) -> u64 {
    let skipped_prefixes: Vec<String> = skipped
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .flat_map(|(l, _)| mlp_param_prefixes(l))
        .collect();
    let attach = attachment.into_iter().flat_map(|a| a.params.iter());
    model
        .params
        .iter()
        .chain(attach)
        .filter(|(name, _)| !skipped_prefixes.iter().any(|p| name.starts_with(p.as_str())))
        .map(|(_, p)| p.value.numel() as u64 * BYTES_PER_VALUE)
        .sum()
}

/// Largest per-layer activation footprint of a `B × T'` pass.
fn peak_activation_bytes(cfg: &ModelConfig, b: usize, t: usize, any_mlp: bool) -> u64 {
    let rows = (b * t) as u64;
    let d = cfg.d_model as u64;
    let attn = rows * 5 * d + (b * cfg.heads * t * t) as u64;
    let mlp = if any_mlp {
        let hidden = if cfg.mlp_kind == MlpKind::Gated { 2 } else { 1 };
        rows * (hidden * cfg.d_ff as u64 + d)
    } else {
        0
    };
    (attn + mlp) * BYTES_PER_VALUE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Collect {
    pub macs: bool,
    pub density: bool,
    pub outputs: bool,
}

impl Default for Collect {
    fn default() -> Self {
        Collect {
            macs: true,
            density: true,
            outputs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    /// Logit rows per example, in input order.
    pub logits: Option<Vec<Vec<f64>>>,
    pub macs: Option<MacTrace>,
    pub density: Option<DensityReport>,
}

/// Evaluation-mode pass over `batches`. With a plan, its scales multiply
/// surviving MLP branches and its skipped layers are removed; without one,
/// `adaptive` (if any) is applied as plain scales.
pub fn run_inference(
    model: &TransformerModel,
    attachment: Option<&PeftAttachment>,
    adaptive: Option<&AdaptiveWeights>,
    plan: Option<&SkipPlan>,
    batches: &[Batch],
    threshold: f64,
    collect: Collect,
) -> Result<InferenceOutput> {
    let cfg = &model.config;
    if let Some(p) = plan {
        if p.layers() != cfg.layers {
            return Err(Error::dim(
                "run_inference",
                format!("skip plan of {} layers for a {}-layer model", p.layers(), cfg.layers),
            ));
        }
    }
    let plan_weights = plan.map(SkipPlan::adaptive);
    let flags = plan.map_or_else(|| vec![false; cfg.layers], SkipPlan::flags);
    let opts = ForwardOptions {
        attachment,
        adaptive: plan_weights.as_ref().or(adaptive),
        skip: plan.map(|_| flags.as_slice()),
        dropout_seed: None,
        trace: collect.macs || collect.density,
    };
    let mut density = if collect.density {
        Some(DensityAccumulator::new(cfg.layers, threshold)?)
    } else {
        None
    };
    let mut trace = MacTrace::default();
    let mut logits = Vec::new();
    let mut peak = 0u64;
    for batch in batches {
        let mut g = Graph::new();
        let start = Instant::now();
        let out = model_forward(&mut g, model, batch, &opts)?;
        trace.duration_secs += start.elapsed().as_secs_f64();
        trace.examples += batch.batch_size;
        if collect.outputs {
            let c = cfg.num_classes;
            logits.extend(g.value(out.logits).data().chunks(c).map(<[f64]>::to_vec));
        }
        if let Some(t) = &out.trace {
            let pats = t.pattern_values(&g);
            if let Some(acc) = density.as_mut() {
                acc.observe(&pats, &t.mask)?;
            }
            if collect.macs {
                let counts = count_macs(cfg, attachment, &pats, &t.mask, &flags, threshold)?;
                trace.counts.merge(&counts);
                let s = t.mask.shape();
                let any_mlp = flags.iter().any(|f| !f);
                peak = peak.max(peak_activation_bytes(cfg, s[0], s[1], any_mlp));
            }
        }
    }
    trace.memory_bytes = parameter_bytes(model, attachment, &flags) + peak;
    Ok(InferenceOutput {
        logits: collect.outputs.then_some(logits),
        macs: collect.macs.then_some(trace),
        density: density.map(|d| d.report()).transpose()?,
    })
}

/// `100·(base − variant)/base`
pub fn percent_saving(base: f64, variant: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() {
        return Err(Error::contract(format!("saving undefined for base value {base}")));
    }
    Ok(100.0 * (base - variant) / base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub runtime_percent: f64,
    /// Structural MACs executed.
    pub macs_percent: f64,
    /// MACs left after zero-skipping.
    pub effective_macs_percent: f64,
    pub memory_percent: f64,
}

pub fn savings_report(base: &MacTrace, variant: &MacTrace) -> Result<SavingsReport> {
    let eff = |t: &MacTrace| (t.counts.total() - t.counts.skipped()) as f64;
    Ok(SavingsReport {
        runtime_percent: percent_saving(base.duration_secs, variant.duration_secs)?,
        macs_percent: percent_saving(base.counts.total() as f64, variant.counts.total() as f64)?,
        effective_macs_percent: percent_saving(eff(base), eff(variant))?,
        memory_percent: percent_saving(base.memory_bytes as f64, variant.memory_bytes as f64)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_examples() {
        assert!(build_skip_plan_with(&[1.0, 1.0], 1e-3).skipped_layers.is_empty());
        let p = build_skip_plan_with(&[0.0, 0.9], 1e-3);
        assert_eq!(p.skipped_layers.iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(p.flags(), vec![true, false]);
        assert!(build_skip_plan_with(&[5e-4], 1e-3).skipped_layers.contains(&0));
        assert!(build_skip_plan_with(&[1e-3], 1e-3).skipped_layers.contains(&0));
    }

    #[test]
    fn saving_formulas() {
        assert!((percent_saving(1632.89, 1489.28).unwrap() - 8.79).abs() < 0.01);
        assert!(matches!(percent_saving(0.0, 1.0), Err(Error::Contract(_))));
        let mut base = MacTrace {
            duration_secs: 2.0,
            memory_bytes: 100,
            ..Default::default()
        };
        base.counts.add(Some(0), MacSite::MlpIn, 50, 0);
        base.counts.add(Some(0), MacSite::MlpOut, 50, 0);
        let same = savings_report(&base, &base).unwrap();
        assert_eq!(same.macs_percent, 0.0);
        assert_eq!(same.runtime_percent, 0.0);
        assert_eq!(same.memory_percent, 0.0);
        let mut half = base.clone();
        half.counts = MacCounts::default();
        half.counts.add(Some(0), MacSite::MlpIn, 25, 0);
        half.counts.add(Some(0), MacSite::MlpOut, 25, 0);
        assert_eq!(savings_report(&base, &half).unwrap().macs_percent, 50.0);
    }

    #[test]
    fn plan_length_mismatch() {
        let model = TransformerModel::new(ModelConfig::default(), 0).unwrap();
        let plan = build_skip_plan_with(&[1.0], 0.0);
        let batch = Batch::from_sequences(&[vec![2, 5]], &[0], 0).unwrap();
        let res = run_inference(&model, None, None, Some(&plan), &[batch], 0.0, Collect::default());
        assert!(matches!(res, Err(Error::Dimension { .. })));
    }

    #[test]
    fn skipped_memory_excludes_mlp_params() {
        let model = TransformerModel::new(ModelConfig::default(), 0).unwrap();
        let full = parameter_bytes(&model, None, &[false, false]);
        let skip = parameter_bytes(&model, None, &[true, false]);
        let cfg = &model.config;
        let mlp = (2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model) as u64 * 8;
        assert_eq!(full - skip, mlp);
    }
}
