use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::evaluate::Lineage;
use crate::error::{Error, Result};
use crate::metrics::{density_change, energy_change};

/// The fields of a report needed for a baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mode: Mode,
    pub metric: f64,
    pub mean_density: f64,
    #[serde(default)]
    pub energy_ratio: Option<f64>,
    #[serde(default)]
    pub lineage: Option<Lineage>,
}

impl ReportSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Baseline versus density-penalized run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: ReportSummary,
    pub candidate: ReportSummary,
    pub density_change_percent: f64,
    /// Absent when either report lacks an energy ratio.
    pub energy_change_percent: Option<f64>,
    pub metric_delta: f64,
    pub warnings: Vec<String>,
}

pub fn compare(baseline: &ReportSummary, candidate: &ReportSummary) -> Result<Comparison> {
    let mut warnings = Vec::new();
    match (&baseline.lineage, &candidate.lineage) {
        (Some(a), Some(b)) if a != b => warnings.push(format!(
            "lineage differs: seed {} / corpus {} vs seed {} / corpus {}",
            a.seed, a.corpus_hash, b.seed, b.corpus_hash
        )),
        (None, _) | (_, None) => warnings.push("lineage missing from a report".into()),
        _ => {}
    }
    let energy_change_percent = match (baseline.energy_ratio, candidate.energy_ratio) {
        (Some(a), Some(b)) => Some(energy_change(a, b)?),
        _ => None,
    };
    Ok(Comparison {
        density_change_percent: density_change(baseline.mean_density, candidate.mean_density)?,
        energy_change_percent,
        metric_delta: candidate.metric - baseline.metric,
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        warnings,
    })
}

fn mode_name(m: Mode) -> String {
    serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

impl Comparison {
    /// Two rows, baseline first; the change columns are filled on the
    /// candidate row only.
    pub fn to_csv(&self) -> String {
        let b = &self.baseline;
        let c = &self.candidate;
        format!(
            "mode,metric,density_percent,density_change_percent,energy_ratio,energy_change_percent\n\
             {},{},{},,{},\n{},{},{},{},{},{}\n",
            mode_name(b.mode),
            b.metric,
            b.mean_density,
            opt(b.energy_ratio),
            mode_name(c.mode),
            c.metric,
            c.mean_density,
            self.density_change_percent,
            opt(c.energy_ratio),
            opt(self.energy_change_percent),
        )
    }
}
