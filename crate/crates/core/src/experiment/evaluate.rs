use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::run::{prepare_data, train, EpochLog, PreparedData, TrainedState};
use crate::error::{Error, Result};
use crate::inference::{build_skip_plan_with, percent_saving, run_inference, Collect, SkipPlan};
use crate::metrics::{accuracy, energy_ratio, layerwise_density_csv, DensityReport, EnergyReport, MacCounts};
use crate::model::Checkpoint;
use crate::objective::SurrogateConfig;
use crate::peft::ParameterCensus;

pub const REPORT_FILE: &str = "report.json";
pub const LAYERWISE_FILE: &str = "layerwise_density.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub seed: u64,
    pub corpus_hash: String,
}

/// Skip-plan results for the adaptive modes. Runtime lives under `timing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSection {
    pub weights: Vec<f64>,
    pub plan: SkipPlan,
    pub skip_metric: f64,
    pub skip_mean_density: f64,
    pub macs_saving_percent: f64,
    pub effective_macs_saving_percent: f64,
    pub memory_saving_percent: f64,
    pub full_memory_bytes: u64,
    pub skip_memory_bytes: u64,
}

/// Wall-clock measurements. Kept apart so the remainder of a report is
/// reproducible bit for bit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_secs: Option<f64>,
    pub inference_secs: f64,
    pub skip_inference_secs: Option<f64>,
    pub skip_runtime_saving_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub lineage: Lineage,
    /// Validation accuracy.
    pub metric: f64,
    pub mean_density: f64,
    pub energy_ratio: Option<f64>,
    pub effective_alpha: f64,
    pub surrogate: SurrogateConfig,
    pub density: DensityReport,
    pub energy: Option<EnergyReport>,
    pub macs: Option<MacCounts>,
    pub memory_bytes: u64,
    pub parameters: ParameterCensus,
    pub trainable_percent: f64,
    pub adaptive: Option<AdaptiveSection>,
    pub training_log: Vec<EpochLog>,
    pub config: ExperimentConfig,
    pub timing: Timing,
}

impl ExperimentReport {
    /// The report as JSON with `timing` removed.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

/// Validation-set evaluation with dropout off: accuracy, density, MACs and
/// memory; in adaptive modes also the skip plan and its savings.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    state: &TrainedState,
    log: Vec<EpochLog>,
    train_secs: Option<f64>,
) -> Result<ExperimentReport> {
    let batches = data.validation_batches(cfg.batch_size)?;
    let full = run_inference(
        &state.model,
        Some(&state.attachment),
        state.adaptive.as_ref(),
        None,
        &batches,
        cfg.threshold,
        Collect::default(),
    )?;
    let density = full.density.expect("density collected");
    let trace = full.macs.expect("macs collected");
    let metric = accuracy(full.logits.as_deref().expect("outputs collected"), &data.val_labels)?;
    let energy = energy_ratio(&trace.counts).ok();
    let mut timing = Timing {
        train_secs,
        inference_secs: trace.duration_secs,
        ..Timing::default()
    };
    let adaptive = match &state.adaptive {
        Some(a) => {
            let plan = build_skip_plan_with(&a.values, cfg.tau);
            let skip = run_inference(
                &state.model,
                Some(&state.attachment),
                None,
                Some(&plan),
                &batches,
                cfg.threshold,
                Collect::default(),
            )?;
            let skip_trace = skip.macs.expect("macs collected");
            let eff = |c: &MacCounts| (c.total() - c.skipped()) as f64;
            timing.skip_inference_secs = Some(skip_trace.duration_secs);
            timing.skip_runtime_saving_percent = percent_saving(trace.duration_secs, skip_trace.duration_secs).ok();
            Some(AdaptiveSection {
                weights: a.values.clone(),
                skip_metric: accuracy(skip.logits.as_deref().expect("outputs collected"), &data.val_labels)?,
                skip_mean_density: skip.density.expect("density collected").mean_density,
                macs_saving_percent: percent_saving(trace.counts.total() as f64, skip_trace.counts.total() as f64)?,
                effective_macs_saving_percent: percent_saving(eff(&trace.counts), eff(&skip_trace.counts))?,
                memory_saving_percent: percent_saving(trace.memory_bytes as f64, skip_trace.memory_bytes as f64)?,
                full_memory_bytes: trace.memory_bytes,
                skip_memory_bytes: skip_trace.memory_bytes,
                plan,
            })
        }
        None => None,
    };
    let parameters = state.census();
    Ok(ExperimentReport {
        mode: cfg.mode,
        lineage: Lineage {
            seed: cfg.seed,
            corpus_hash: format!("{:016x}", data.handle.corpus_hash()),
        },
        metric,
        mean_density: density.mean_density,
        energy_ratio: energy.as_ref().map(|e| e.energy_ratio),
        effective_alpha: cfg.effective_alpha(),
        surrogate: cfg.objective.resolved_surrogate(&cfg.model),
        trainable_percent: parameters.trainable_percent(),
        parameters,
        memory_bytes: trace.memory_bytes,
        macs: Some(trace.counts),
        energy,
        density,
        adaptive,
        training_log: log,
        config: cfg.clone(),
        timing,
    })
}

/// Output of a full train-and-evaluate run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: ExperimentReport,
    pub state: TrainedState,
}

/// Trains, evaluates, and returns everything in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let out = train(cfg, &data)?;
    let report = evaluate(cfg, &data, &out.state, out.log, Some(out.train_secs))?;
    Ok(RunArtifacts {
        report,
        state: out.state,
    })
}

/// Writes the report, the layerwise density table and the checkpoint
/// into `dir`.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let report = dir.join(REPORT_FILE);
    std::fs::write(&report, serde_json::to_string_pretty(&run.report)?)?;
    let csv = dir.join(LAYERWISE_FILE);
    std::fs::write(&csv, layerwise_density_csv(&run.report.density))?;
    let ck = dir.join(CHECKPOINT_FILE);
    run.state.to_checkpoint(cfg).save(&ck)?;
    Ok(vec![report, csv, ck])
}

/// Evaluates a saved checkpoint on the configured validation split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(path)?;
    let state = TrainedState::from_checkpoint(cfg, &ck)?;
    let data = prepare_data(cfg)?;
    if data.handle.vocab.len() > cfg.model.vocab_size {
        return Err(Error::Version("checkpoint vocabulary does not cover the dataset".into()));
    }
    evaluate(cfg, &data, &state, Vec::new(), None)
}

/// Reads a report written by [`write_artifacts`].
pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
