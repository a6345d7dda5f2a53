//! Experiment orchestration: configuration, training, evaluation, reports
//! and sweeps.

mod compare;
mod config;
mod evaluate;
mod run;
mod sweep;

pub use compare::{compare, Comparison, ReportSummary};
pub use config::{apply_overrides, default_lr, AblationAxis, DataSource, ExperimentConfig, Mode, PruneConfig, SweepConfig};
pub use evaluate::{
    evaluate, evaluate_checkpoint, read_report, run_experiment, write_artifacts, AdaptiveSection, ExperimentReport,
    Lineage, RunArtifacts, Timing, CHECKPOINT_FILE, LAYERWISE_FILE, REPORT_FILE,
};
pub use run::{prepare_data, train, train_from, EpochLog, PreparedData, TrainOutcome, TrainedState};
pub use sweep::{ablation_csv, ablation_sweep, prune_sweep, with_axis, AblationRow};
