use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{AblationAxis, ExperimentConfig};
use super::evaluate::run_experiment;
use super::run::{PreparedData, TrainedState};
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::objective::SurrogateConfig;
use crate::pruning::{collect_calibration_norms, sparsity_sweep, SweepRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub metric: f64,
    pub density_percent: f64,
}

/// The config with one hyperparameter replaced.
pub fn with_axis(cfg: &ExperimentConfig, axis: AblationAxis, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        AblationAxis::Alpha => c.objective.alpha = value,
        AblationAxis::Epsilon | AblationAxis::Beta => {
            let mut s = c
                .objective
                .surrogate
                .unwrap_or_else(|| SurrogateConfig::default_for(&c.model));
            if axis == AblationAxis::Epsilon {
                s.epsilon = value;
            } else {
                s.beta = value;
            }
            c.objective.surrogate = Some(s);
        }
    }
    c
}

/// One train-and-evaluate run per value, in order.
pub fn ablation_sweep(cfg: &ExperimentConfig, axis: AblationAxis, values: &[f64]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let c = with_axis(cfg, axis, v);
            c.validate()?;
            let run = run_experiment(&c)?;
            Ok(AblationRow {
                value: v,
                metric: run.report.metric,
                density_percent: run.report.mean_density,
            })
        })
        .collect()
}

/// `value,metric,density_percent`
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("value,metric,density_percent\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.value, r.metric, r.density_percent);
    }
    out
}

/// Calibrates on the training split and sweeps the configured sparsity
/// levels over the validation split.
pub fn prune_sweep(cfg: &ExperimentConfig, data: &PreparedData, state: &TrainedState) -> Result<Vec<SweepRow>> {
    let n = cfg.prune.calibration_samples.min(data.train_ids.len());
    let norms = collect_calibration_norms(
        &state.model,
        Some(&state.attachment),
        state.adaptive.as_ref(),
        &data.train_ids,
        n,
        cfg.prune.calibration_seed,
        cfg.batch_size,
        PAD_ID,
    )?;
    let eval = data.validation_batches(cfg.batch_size)?;
    sparsity_sweep(
        &state.model,
        Some(&state.attachment),
        state.adaptive.as_ref(),
        &norms,
        &cfg.prune.levels,
        &eval,
        cfg.threshold,
        cfg.prune.grouping,
    )
}
