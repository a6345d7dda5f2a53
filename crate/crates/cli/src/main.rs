//! `deft`: train, evaluate, compare and sweep density-regularized
//! fine-tuning runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deft_core::experiment::{
    ablation_csv, ablation_sweep, compare, evaluate, evaluate_checkpoint, prepare_data, prune_sweep, run_experiment,
    write_artifacts, ExperimentConfig, ExperimentReport, ReportSummary, TrainedState, CHECKPOINT_FILE,
};
use deft_core::metrics::layerwise_density_csv;
use deft_core::model::Checkpoint;
use deft_core::pruning::sweep_csv;
use deft_core::Error;

const SWEEP_FILE: &str = "sweep.csv";

#[derive(Parser)]
#[command(name = "deft", version, about = "Density-efficient fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set objective.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate, and write report, layerwise density and checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the configured validation split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output_dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for the evaluation report; defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Density and energy change between a baseline and a candidate report.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Also write the comparison CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation over the configured axis and values.
    Sweep(ConfigArgs),
    /// WANDA pruning sweep of a checkpoint (or a freshly trained model).
    PruneSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Skip-plan inference summary for a checkpoint.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericalAbort { .. } => 3,
        _ => 1,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn summary(r: &ExperimentReport) {
    println!(
        "{:?}: metric {:.4}  density {:.2}%  energy ratio {}  trainable {:.3}%",
        r.mode,
        r.metric,
        r.mean_density,
        r.energy_ratio.map_or("n/a".to_string(), |e| format!("{e:.4}")),
        r.trainable_percent
    );
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let run = run_experiment(&cfg)?;
            for p in write_artifacts(&cfg.output_dir, &cfg, &run)? {
                eprintln!("wrote {}", p.display());
            }
            summary(&run.report);
        }
        Command::Evaluate { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let report = evaluate_checkpoint(&cfg, &checkpoint_path(&cfg, checkpoint))?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("eval"));
            write(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write(&dir.join("layerwise_density.csv"), &layerwise_density_csv(&report.density))?;
            summary(&report);
        }
        Command::Compare { baseline, candidate, out } => {
            let c = compare(&ReportSummary::load(&baseline)?, &ReportSummary::load(&candidate)?)?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            let csv = c.to_csv();
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let rows = ablation_sweep(&cfg, cfg.sweep.axis, &cfg.sweep.values)?;
            let csv = ablation_csv(&rows);
            write(&cfg.output_dir.join(SWEEP_FILE), &csv)?;
            print!("{csv}");
        }
        Command::PruneSweep { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let state = match checkpoint {
                Some(p) => TrainedState::from_checkpoint(&cfg, &Checkpoint::load(&p)?)?,
                None => run_experiment(&cfg)?.state,
            };
            let csv = sweep_csv(&prune_sweep(&cfg, &data, &state)?);
            write(&cfg.output_dir.join("prune").join(SWEEP_FILE), &csv)?;
            print!("{csv}");
        }
        Command::Infer { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let state = TrainedState::from_checkpoint(&cfg, &Checkpoint::load(&checkpoint_path(&cfg, checkpoint))?)?;
            let r = evaluate(&cfg, &data, &state, Vec::new(), None)?;
            print_inference_table(&r);
        }
    }
    Ok(())
}

fn print_inference_table(r: &ExperimentReport) {
    println!("{:<10} {:>8} {:>12} {:>14} {:>14}", "plan", "metric", "runtime (s)", "memory (B)", "MACs");
    let macs = r.macs.as_ref().map_or(0, |m| m.total());
    println!(
        "{:<10} {:>8.4} {:>12.4} {:>14} {:>14}",
        "full", r.metric, r.timing.inference_secs, r.memory_bytes, macs
    );
    match &r.adaptive {
        Some(a) => {
            let skip_secs = r.timing.skip_inference_secs.unwrap_or(f64::NAN);
            let skip_macs = (macs as f64 * (1.0 - a.macs_saving_percent / 100.0)).round();
            println!(
                "{:<10} {:>8.4} {:>12.4} {:>14} {:>14}",
                "skip", a.skip_metric, skip_secs, a.skip_memory_bytes, skip_macs
            );
            println!(
                "{:<10} {:>8} {:>12.2} {:>14.2} {:>14.2}",
                "saving %",
                "",
                r.timing.skip_runtime_saving_percent.unwrap_or(f64::NAN),
                a.memory_saving_percent,
                a.macs_saving_percent
            );
            println!("skipped layers: {:?} (tau {})", a.plan.skipped_layers, a.plan.tau);
        }
        None => println!("no adaptive weights: nothing to skip"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
