//! Activation-aware pruning of the first MLP projection.
//!
//! Importance is `I_ij = |W_ij|·‖X_j‖₂` on the `out × in` view of the
//! weight, where `‖X_j‖₂` is the calibration norm of input feature `j`.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::inference::{run_inference, Collect};
use crate::metrics::accuracy;
use crate::model::{first_projection_name, model_forward, Batch, ForwardOptions, MlpKind, ParamStore, TransformerModel};
use crate::objective::AdaptiveWeights;
use crate::peft::PeftAttachment;
use crate::tensor::Tensor;

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 128;

/// Per-layer `‖X_j‖₂` over the calibration tokens, one entry per input
/// feature of the first MLP projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationNorms {
    pub per_layer: Vec<Vec<f64>>,
}

/// Accumulates squared feature sums over the unmasked rows of MLP inputs.
#[derive(Clone, Debug)]
pub struct NormAccumulator {
    sq: Vec<Vec<f64>>,
}

impl NormAccumulator {
    pub fn new(layers: usize, features: usize) -> Self {
        NormAccumulator {
            sq: vec![vec![0.0; features]; layers],
        }
    }

    /// `input` is `B × T × d` for `layer`, `mask` is `B × T`.
    pub fn observe(&mut self, layer: usize, input: &Tensor, mask: &Tensor) -> Result<()> {
        let acc = self.sq.get_mut(layer).ok_or(Error::Range {
            what: "layer",
            index: layer,
            len: 0,
        })?;
        let s = input.shape();
        if s.len() != 3 || s[2] != acc.len() || mask.shape() != &s[..2] {
            return Err(Error::dim(
                "calibration",
                format!("input {s:?} with mask {:?}", mask.shape()),
            ));
        }
        for (row, &m) in input.data().chunks(s[2]).zip(mask.data()) {
            if m != 0.0 {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x * x;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> CalibrationNorms {
        CalibrationNorms {
            per_layer: self
                .sq
                .into_iter()
                .map(|l| l.into_iter().map(f64::sqrt).collect())
                .collect(),
        }
    }
}

/// Draws `n_samples` sequences without replacement (seeded) and records the
/// norms of every layer's MLP input, in evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn collect_calibration_norms(
    model: &TransformerModel,
    attachment: Option<&PeftAttachment>,
    adaptive: Option<&AdaptiveWeights>,
    examples: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
    batch_size: usize,
    pad_id: usize,
) -> Result<CalibrationNorms> {
    if examples.is_empty() || n_samples == 0 {
        return Err(Error::contract("empty calibration set"));
    }
    if n_samples > examples.len() {
        return Err(Error::contract(format!(
            "{n_samples} calibration samples requested from {} examples",
            examples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, examples.len(), n_samples).into_vec();
    picked.sort_unstable();
    let chosen: Vec<Vec<usize>> = picked.into_iter().map(|i| examples[i].clone()).collect();
    let cfg = &model.config;
    let mut acc = NormAccumulator::new(cfg.layers, cfg.d_model);
    let opts = ForwardOptions {
        attachment,
        adaptive,
        trace: true,
        ..Default::default()
    };
    for chunk in chosen.chunks(batch_size.max(1)) {
        let labels = vec![0; chunk.len()];
        let batch = Batch::from_sequences(chunk, &labels, pad_id)?;
        let mut g = Graph::new();
        let out = model_forward(&mut g, model, &batch, &opts)?;
        let trace = out.trace.expect("trace requested");
        for (l, lt) in trace.layers.iter().enumerate() {
            let input = lt.mlp_input.expect("no layers skipped during calibration");
            acc.observe(l, g.value(input), &trace.mask)?;
        }
    }
    Ok(acc.finish())
}

/// `I_ij = |W_ij|·norms_j` for `w` in `out × in` layout.
pub fn wanda_scores(w: &Tensor, norms: &[f64]) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 2 || s[1] != norms.len() {
        return Err(Error::dim(
            "wanda_scores",
            format!("weight {s:?} with {} norms", norms.len()),
        ));
    }
    let data = w
        .data()
        .chunks(s[1])
        .flat_map(|row| row.iter().zip(norms).map(|(w, n)| w.abs() * n))
        .collect();
    Tensor::new(s.to_vec(), data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each output row prunes its own lowest-scoring fraction.
    #[default]
    PerOutputRow,
    Global,
}

/// Keep flags over an `out × in` weight view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn achieved_sparsity(&self) -> f64 {
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn achieved_sparsity(&self) -> Vec<f64> {
        self.layers.iter().map(LayerMask::achieved_sparsity).collect()
    }

    /// Stores masks as `prune.layers.{l}.mask` 0/1 arrays.
    pub fn insert_into(&self, store: &mut ParamStore) {
        for (l, m) in self.layers.iter().enumerate() {
            let data = m.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            store.insert(format!("prune.layers.{l}.mask"), Tensor::from_parts(vec![m.rows, m.cols], data), false);
        }
    }
}

/// Lowest-scoring `round(sparsity·N)` entries are pruned. Per-row grouping
/// spreads that count evenly over rows, the first rows taking any
/// remainder. Ties go to the lower flat index.
pub fn prune_by_sparsity(scores: &Tensor, sparsity: f64, grouping: Grouping) -> Result<LayerMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0,1]")));
    }
    let s = scores.shape();
    if s.len() != 2 {
        return Err(Error::dim("prune_by_sparsity", format!("scores {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let data = scores.data();
    let k = (sparsity * (rows * cols) as f64).round() as usize;
    let mut keep = vec![true; rows * cols];
    let by_score = |a: &usize, b: &usize| data[*a].total_cmp(&data[*b]).then(a.cmp(b));
    match grouping {
        Grouping::Global => {
            let mut idx: Vec<usize> = (0..rows * cols).collect();
            idx.sort_by(by_score);
            idx[..k].iter().for_each(|&i| keep[i] = false);
        }
        Grouping::PerOutputRow => {
            let (base, extra) = (k / rows, k % rows);
            for r in 0..rows {
                let kr = base + usize::from(r < extra);
                let mut idx: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                idx.sort_by(by_score);
                idx[..kr].iter().for_each(|&i| keep[i] = false);
            }
        }
    }
    Ok(LayerMask { rows, cols, keep })
}

/// `out × in` view of the first MLP projection (`W1ᵀ`, or `Ws` as stored).
pub fn first_projection_view(model: &TransformerModel, layer: usize) -> Result<Tensor> {
    let w = model.params.tensor(&first_projection_name(&model.config, layer))?;
    Ok(match model.config.mlp_kind {
        MlpKind::Gated => w.clone(),
        MlpKind::Standard => transpose(w),
    })
}

fn transpose(w: &Tensor) -> Tensor {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Zeroes masked entries of every layer's first projection in place.
pub fn apply_mask(model: &mut TransformerModel, mask: &PruneMask) -> Result<()> {
    let cfg = model.config.clone();
    if mask.layers.len() != cfg.layers {
        return Err(Error::dim(
            "apply_mask",
            format!("{} layer masks for {} layers", mask.layers.len(), cfg.layers),
        ));
    }
    for (l, m) in mask.layers.iter().enumerate() {
        let w = &mut model.params.get_mut(&first_projection_name(&cfg, l))?.value;
        let (sr, sc) = (w.shape()[0], w.shape()[1]);
        let view = match cfg.mlp_kind {
            MlpKind::Gated => (sr, sc),
            MlpKind::Standard => (sc, sr),
        };
        if view != (m.rows, m.cols) {
            return Err(Error::dim("apply_mask", format!("mask {}×{} for weight {sr}×{sc}", m.rows, m.cols)));
        }
        let data = w.data_mut();
        for i in 0..m.rows {
            for j in 0..m.cols {
                if !m.keep[i * m.cols + j] {
                    let flat = match cfg.mlp_kind {
                        MlpKind::Gated => i * sc + j,
                        MlpKind::Standard => j * sc + i,
                    };
                    data[flat] = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Scores every layer against `norms`, masks at `sparsity` and returns the
/// pruned copy with its mask.
pub fn prune_model(
    model: &TransformerModel,
    norms: &CalibrationNorms,
    sparsity: f64,
    grouping: Grouping,
) -> Result<(TransformerModel, PruneMask)> {
    if norms.per_layer.len() != model.config.layers {
        return Err(Error::dim(
            "prune_model",
            format!("norms for {} layers, model has {}", norms.per_layer.len(), model.config.layers),
        ));
    }
    let mut layers = Vec::with_capacity(model.config.layers);
    for (l, n) in norms.per_layer.iter().enumerate() {
        let scores = wanda_scores(&first_projection_view(model, l)?, n)?;
        layers.push(prune_by_sparsity(&scores, sparsity, grouping)?);
    }
    let mask = PruneMask { layers };
    let mut pruned = model.clone();
    apply_mask(&mut pruned, &mask)?;
    Ok((pruned, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity: f64,
    /// Mean achieved weight sparsity over layers.
    pub achieved_sparsity: f64,
    pub metric: f64,
    pub density_percent: f64,
}

/// Prunes a fresh copy at each level from the same norms and evaluates it.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_sweep(
    model: &TransformerModel,
    attachment: Option<&PeftAttachment>,
    adaptive: Option<&AdaptiveWeights>,
    norms: &CalibrationNorms,
    levels: &[f64],
    eval: &[Batch],
    threshold: f64,
    grouping: Grouping,
) -> Result<Vec<SweepRow>> {
    let labels: Vec<usize> = eval.iter().flat_map(|b| b.labels.iter().copied()).collect();
    levels
        .iter()
        .map(|&level| {
            let (pruned, mask) = prune_model(model, norms, level, grouping)?;
            let collect = Collect {
                macs: false,
                density: true,
                outputs: true,
            };
            let out = run_inference(&pruned, attachment, adaptive, None, eval, threshold, collect)?;
            let achieved = mask.achieved_sparsity();
            Ok(SweepRow {
                sparsity: level,
                achieved_sparsity: achieved.iter().sum::<f64>() / achieved.len() as f64,
                metric: accuracy(out.logits.as_deref().unwrap_or_default(), &labels)?,
                density_percent: out.density.map_or(f64::NAN, |d| d.mean_density),
            })
        })
        .collect()
}

/// `sparsity,metric,density_percent`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sparsity,metric,density_percent\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.sparsity, r.metric, r.density_percent);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_examples() {
        let mut a = NormAccumulator::new(1, 2);
        a.observe(0, &Tensor::zeros(&[1, 2, 2]), &Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(a.finish().per_layer[0], vec![0.0, 0.0]);
        let mut a = NormAccumulator::new(1, 2);
        a.observe(0, &Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap(), &Tensor::ones(&[1, 1])).unwrap();
        assert_eq!(a.finish().per_layer[0], vec![3.0, 4.0]);
        let mut a = NormAccumulator::new(1, 2);
        a.observe(0, &Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap(), &Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(a.finish().per_layer[0], vec![5.0, 0.0]);
    }

    #[test]
    fn masked_tokens_do_not_count() {
        let mut a = NormAccumulator::new(1, 1);
        let x = Tensor::new(vec![1, 2, 1], vec![3.0, 100.0]).unwrap();
        a.observe(0, &x, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(a.finish().per_layer[0], vec![3.0]);
    }

    #[test]
    fn score_examples() {
        let w = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        assert_eq!(wanda_scores(&w, &[4.0, 1.0]).unwrap().data(), &[4.0, 2.0]);
        assert_eq!(wanda_scores(&w, &[1.0, 1.0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(wanda_scores(&w, &[0.0, 1.0]).unwrap().data(), &[0.0, 2.0]);
        assert!(matches!(wanda_scores(&w, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn half_sparsity_keeps_two_per_row() {
        let scores = Tensor::matrix(2, 4, vec![4.0, 1.0, 3.0, 2.0, 0.5, 0.5, 9.0, 0.1]).unwrap();
        let m = prune_by_sparsity(&scores, 0.5, Grouping::PerOutputRow).unwrap();
        assert_eq!(m.keep, vec![true, false, true, false, false, true, true, false]);
    }

    #[test]
    fn sparsity_bounds() {
        let scores = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(prune_by_sparsity(&scores, 0.0, Grouping::Global).unwrap().keep.iter().all(|&k| k));
        assert!(prune_by_sparsity(&scores, 1.0, Grouping::PerOutputRow).unwrap().keep.iter().all(|&k| !k));
        assert!(matches!(prune_by_sparsity(&scores, 1.5, Grouping::Global), Err(Error::Config(_))));
    }

    #[test]
    fn rounding_stays_within_one_entry() {
        let scores = Tensor::matrix(3, 3, (0..9).map(f64::from).collect()).unwrap();
        for s in [0.1, 0.33, 0.5, 0.77] {
            let m = prune_by_sparsity(&scores, s, Grouping::PerOutputRow).unwrap();
            assert!((m.achieved_sparsity() - s).abs() <= 1.0 / 9.0);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(transpose(&transpose(&w)), w);
        assert_eq!(transpose(&w).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn csv_header() {
        let rows = vec![SweepRow {
            sparsity: 0.5,
            achieved_sparsity: 0.5,
            metric: 0.75,
            density_percent: 40.0,
        }];
        assert_eq!(sweep_csv(&rows), "sparsity,metric,density_percent\n0.5,0.75,40\n");
    }
}
