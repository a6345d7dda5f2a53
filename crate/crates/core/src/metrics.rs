//! Activation density, density change, and the zero-skip energy model.
//!
//! The energy model charges one unit per multiply-accumulate. A MAC is
//! skippable only when its activation operand is an MLP activation-pattern
//! entry with `|O| ≤ θ`, i.e. the second MLP projection (or the gated
//! product path). Every other matmul is charged densely over unmasked rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Streaming per-layer nonzero counter. Counts, not averages, are
/// accumulated, so any partition of the data gives the same result.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityAccumulator {
    threshold: f64,
    nonzero: Vec<u64>,
    total: Vec<u64>,
    positions: u64,
}

impl DensityAccumulator {
    pub fn new(layers: usize, threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) {
            return Err(Error::config(format!("nonzero threshold {threshold} must be nonnegative")));
        }
        Ok(DensityAccumulator {
            threshold,
            nonzero: vec![0; layers],
            total: vec![0; layers],
            positions: 0,
        })
    }

    pub fn layers(&self) -> usize {
        self.nonzero.len()
    }

    /// Adds one batch: `patterns[l]` is `B × T × d_ff`, `mask` is `B × T`.
    pub fn observe(&mut self, patterns: &[&Tensor], mask: &Tensor) -> Result<()> {
        if patterns.len() != self.layers() {
            return Err(Error::dim(
                "density",
                format!("{} patterns for {} layers", patterns.len(), self.layers()),
            ));
        }
        let valid = mask.data().iter().filter(|&&m| m != 0.0).count() as u64;
        for (l, p) in patterns.iter().enumerate() {
            let s = p.shape();
            if s.len() != 3 || mask.shape() != &s[..2] {
                return Err(Error::dim(
                    "density",
                    format!("pattern {s:?} with mask {:?}", mask.shape()),
                ));
            }
            let f = s[2];
            let mut count = 0u64;
            for (row, &m) in p.data().chunks(f).zip(mask.data()) {
                if m != 0.0 {
                    count += row.iter().filter(|v| v.abs() > self.threshold).count() as u64;
                }
            }
            self.nonzero[l] += count;
            self.total[l] += valid * f as u64;
        }
        self.positions += valid;
        Ok(())
    }

    pub fn merge(&mut self, other: &DensityAccumulator) -> Result<()> {
        if other.layers() != self.layers() || other.threshold != self.threshold {
            return Err(Error::contract("merging incompatible density accumulators"));
        }
        for l in 0..self.layers() {
            self.nonzero[l] += other.nonzero[l];
            self.total[l] += other.total[l];
        }
        self.positions += other.positions;
        Ok(())
    }

    pub fn report(&self) -> Result<DensityReport> {
        if self.positions == 0 || self.layers() == 0 {
            return Err(Error::contract("density report over no observed positions"));
        }
        let per_layer: Vec<f64> = self
            .nonzero
            .iter()
            .zip(&self.total)
            .map(|(&n, &t)| 100.0 * n as f64 / t as f64)
            .collect();
        let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
        Ok(DensityReport {
            per_layer_density: per_layer,
            mean_density: mean,
            nonzero_threshold: self.threshold,
            positions: self.positions,
            layer_averaging: "uniform".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// Percent of unmasked activation entries with `|O| > θ`, per layer.
    pub per_layer_density: Vec<f64>,
    pub mean_density: f64,
    pub nonzero_threshold: f64,
    /// Unmasked `(b, t)` positions counted.
    pub positions: u64,
    pub layer_averaging: String,
}

/// Density of a single batch of activation patterns.
pub fn density_percent(patterns: &[&Tensor], mask: &Tensor, threshold: f64) -> Result<DensityReport> {
    let mut acc = DensityAccumulator::new(patterns.len(), threshold)?;
    acc.observe(patterns, mask)?;
    acc.report()
}

/// `(d_peft − d_deft) / d_peft · 100`
pub fn density_change(d_peft: f64, d_deft: f64) -> Result<f64> {
    relative_change(d_peft, d_deft, "density change")
}

/// `(r_peft − r_deft) / r_peft · 100`
pub fn energy_change(r_peft: f64, r_deft: f64) -> Result<f64> {
    relative_change(r_peft, r_deft, "energy change")
}

fn relative_change(base: f64, variant: f64, what: &str) -> Result<f64> {
    if base == 0.0 || !base.is_finite() {
        return Err(Error::contract(format!("{what} undefined for base value {base}")));
    }
    Ok((base - variant) / base * 100.0)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions for {} labels", logits.len(), labels.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::contract("accuracy over an empty set"));
    }
    let correct = logits.iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `layer,density_percent` rows in layer order.
pub fn layerwise_density_csv(report: &DensityReport) -> String {
    let mut out = String::from("layer,density_percent\n");
    for (l, d) in report.per_layer_density.iter().enumerate() {
        let _ = writeln!(out, "{l},{d}");
    }
    out
}

/// Matmul site in the MAC accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacSite {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    AttnScores,
    AttnContext,
    Lora,
    /// `X·W1` or `X·Wsᵀ`
    MlpIn,
    /// `X·Weᵀ` of gated blocks.
    MlpGate,
    /// `O·W2` or the gated product times `Woᵀ`; the only zero-skippable site.
    MlpOut,
    Adapter,
    Head,
}

impl MacSite {
    pub fn is_mlp(self) -> bool {
        matches!(self, MacSite::MlpIn | MacSite::MlpGate | MacSite::MlpOut | MacSite::Adapter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacRecord {
    /// `None` for sites outside the layer stack (the head).
    pub layer: Option<usize>,
    pub site: MacSite,
    pub total: u64,
    pub skipped: u64,
}

/// Per-site MAC totals, kept sorted by `(layer, site)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts {
    pub records: Vec<MacRecord>,
}

impl MacCounts {
    pub fn add(&mut self, layer: Option<usize>, site: MacSite, total: u64, skipped: u64) {
        debug_assert!(skipped <= total);
        let key = (layer, site);
        match self.records.binary_search_by(|r| (r.layer, r.site).cmp(&key)) {
            Ok(i) => {
                self.records[i].total += total;
                self.records[i].skipped += skipped;
            }
            Err(i) => self.records.insert(
                i,
                MacRecord {
                    layer,
                    site,
                    total,
                    skipped,
                },
            ),
        }
    }

    pub fn merge(&mut self, other: &MacCounts) {
        for r in &other.records {
            self.add(r.layer, r.site, r.total, r.skipped);
        }
    }

    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| r.total).sum()
    }

    pub fn skipped(&self) -> u64 {
        self.records.iter().map(|r| r.skipped).sum()
    }

    /// Total MACs at sites matching `pred`.
    pub fn total_where(&self, pred: impl Fn(&MacRecord) -> bool) -> u64 {
        self.records.iter().filter(|r| pred(r)).map(|r| r.total).sum()
    }

    pub fn get(&self, layer: Option<usize>, site: MacSite) -> Option<&MacRecord> {
        self.records.iter().find(|r| r.layer == layer && r.site == site)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: usize,
    pub total_macs: u64,
    pub skipped_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total_macs: u64,
    pub skipped_macs: u64,
    /// `(total − skipped) / total`
    pub energy_ratio: f64,
    pub per_layer: Vec<LayerEnergy>,
}

pub fn energy_ratio(counts: &MacCounts) -> Result<EnergyReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::contract("energy ratio over zero MACs"));
    }
    let skipped = counts.skipped();
    let mut per_layer: Vec<LayerEnergy> = Vec::new();
    for r in &counts.records {
        let Some(l) = r.layer else { continue };
        match per_layer.last_mut() {
            Some(e) if e.layer == l => {
                e.total_macs += r.total;
                e.skipped_macs += r.skipped;
            }
            _ => per_layer.push(LayerEnergy {
                layer: l,
                total_macs: r.total,
                skipped_macs: r.skipped,
            }),
        }
    }
    Ok(EnergyReport {
        total_macs: total,
        skipped_macs: skipped,
        energy_ratio: (total - skipped) as f64 / total as f64,
        per_layer,
    })
}
