use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::autodiff::Graph;
use crate::data::{load_dataset, make_batches, make_synthetic_task, DatasetHandle};
use crate::error::{Error, Result};
use crate::model::{model_forward, Batch, Checkpoint, ForwardOptions, ParamStore, TransformerModel, ADAPTIVE_PARAM};
use crate::objective::{ada_density_loss, density_loss, init_adaptive_weights_with, total_loss, AdaptiveWeights};
use crate::optim::AdamW;
use crate::peft::{census, ParameterCensus, PeftAttachment};
use crate::tensor::Tensor;
use crate::metrics::DensityAccumulator;

/// Model, attachment and adaptive weights of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedState {
    pub model: TransformerModel,
    pub attachment: PeftAttachment,
    pub adaptive: Option<AdaptiveWeights>,
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainedState {
    /// Seeded backbone with Θ frozen, fresh attachment, and adaptive
    /// weights in the adaptive modes.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let mut model = TransformerModel::new(cfg.model.clone(), cfg.seed)?;
        model.freeze_backbone();
        let attachment = PeftAttachment::new(&cfg.model, cfg.peft.clone(), mix(cfg.seed, 1))?;
        let adaptive = if cfg.mode.adaptive() {
            let mut a = init_adaptive_weights_with(
                cfg.model.layers,
                cfg.adaptive_init_mean,
                cfg.adaptive_init_std,
                mix(cfg.seed, 2),
            )?;
            a.tau = cfg.tau;
            Some(a)
        } else {
            None
        };
        Ok(TrainedState {
            model,
            attachment,
            adaptive,
        })
    }

    pub fn census(&self) -> ParameterCensus {
        census(&self.model, Some(&self.attachment), self.adaptive.as_ref())
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut params = ParamStore::new();
        for (name, p) in self.model.params.iter().chain(self.attachment.params.iter()) {
            params.insert(name, p.value.clone(), p.trainable);
        }
        if let Some(a) = &self.adaptive {
            params.insert(ADAPTIVE_PARAM, Tensor::from_parts(vec![a.values.len()], a.values.clone()), a.trainable);
        }
        Checkpoint::new(cfg.to_value(), params)
    }

    /// Rebuilds the state, rejecting checkpoints written for another model,
    /// attachment or mode.
    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let saved: ExperimentConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Version(format!("checkpoint config unreadable: {e}")))?;
        if saved.model != cfg.model || saved.peft != cfg.peft || saved.mode.adaptive() != cfg.mode.adaptive() {
            return Err(Error::Version(
                "checkpoint was written for a different model, attachment or mode".into(),
            ));
        }
        let mut state = TrainedState::init(cfg)?;
        for (name, p) in state.model.params.iter_mut().chain(state.attachment.params.iter_mut()) {
            let stored = ck
                .params
                .get(name)
                .map_err(|_| Error::Version(format!("checkpoint lacks `{name}`")))?;
            if stored.value.shape() != p.value.shape() {
                return Err(Error::Version(format!("`{name}` has a different shape in the checkpoint")));
            }
            p.value = stored.value.clone();
            p.trainable = stored.trainable;
        }
        if let Some(a) = state.adaptive.as_mut() {
            let stored = ck
                .params
                .get(ADAPTIVE_PARAM)
                .map_err(|_| Error::Version("checkpoint lacks adaptive weights".into()))?;
            if stored.value.numel() != a.values.len() {
                return Err(Error::Version("adaptive weight count differs".into()));
            }
            a.values = stored.value.data().to_vec();
            a.trainable = stored.trainable;
        }
        Ok(state)
    }
}

/// Encoded splits ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub handle: DatasetHandle,
    pub train_ids: Vec<Vec<usize>>,
    pub train_labels: Vec<usize>,
    pub val_ids: Vec<Vec<usize>>,
    pub val_labels: Vec<usize>,
}

impl PreparedData {
    pub fn validation_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        make_batches(&self.val_ids, &self.val_labels, batch_size, None)
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let handle = match &cfg.data {
        DataSource::Synthetic {
            kind,
            train_size,
            validation_size,
            seed,
        } => make_synthetic_task(*kind, *train_size, *validation_size, *seed)?,
        DataSource::Jsonl { train, validation } => load_dataset(train, validation)?,
    };
    if handle.vocab.len() > cfg.model.vocab_size {
        return Err(Error::config(format!(
            "dataset vocabulary of {} exceeds model.vocab_size {}",
            handle.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    if handle.num_classes() > cfg.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model.num_classes is {}",
            handle.num_classes(),
            cfg.model.num_classes
        )));
    }
    let train_ids = handle.encode_split(&handle.train);
    let val_ids = handle.encode_split(&handle.validation);
    let room = cfg.model.max_seq_len - cfg.peft.virtual_tokens();
    if let Some(long) = train_ids.iter().chain(&val_ids).map(Vec::len).find(|&n| n > room) {
        return Err(Error::Length(format!("example of {long} tokens exceeds the {room} available positions")));
    }
    Ok(PreparedData {
        train_labels: handle.train.iter().map(|e| e.label).collect(),
        val_labels: handle.validation.iter().map(|e| e.label).collect(),
        handle,
        train_ids,
        val_ids,
    })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub density_loss: f64,
    /// Measured on the training stream, dropout active.
    pub density_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainedState,
    pub log: Vec<EpochLog>,
    pub train_secs: f64,
}

/// Mini-batch training: traced forward, density term over the trace
/// (scaled by `S` in adaptive modes), `task + α·density`, AdamW on the
/// trainable set, then `S` clamped to `[0,1]`.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let state = TrainedState::init(cfg)?;
    train_from(cfg, data, state)
}

pub fn train_from(cfg: &ExperimentConfig, data: &PreparedData, mut state: TrainedState) -> Result<TrainOutcome> {
    let start = Instant::now();
    let alpha = cfg.effective_alpha();
    let surrogate = cfg.objective.resolved_surrogate(&cfg.model);
    let granularity = cfg.objective.granularity;
    let mut opt = AdamW::new(cfg.learning_rate(), &cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            &data.train_ids,
            &data.train_labels,
            cfg.batch_size,
            Some(mix(cfg.seed, 100 + epoch as u64)),
        )?;
        let mut acc = DensityAccumulator::new(cfg.model.layers, cfg.threshold)?;
        let (mut task_sum, mut dens_sum) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            g.set_check_finite(false);
            g.set_retain_intermediate(false);
            let opts = ForwardOptions {
                attachment: Some(&state.attachment),
                adaptive: state.adaptive.as_ref(),
                skip: None,
                dropout_seed: Some(mix(mix(cfg.seed, epoch as u64), bi as u64)),
                trace: true,
            };
            let out = model_forward(&mut g, &state.model, batch, &opts)?;
            let trace = out.trace.expect("trace requested");
            let task = g.cross_entropy(out.logits, &batch.labels)?;
            let density = match out.bindings.get(ADAPTIVE_PARAM) {
                Some(s) => ada_density_loss(&mut g, &trace, s, granularity, &surrogate),
                None => density_loss(&mut g, &trace, granularity, &surrogate),
            };
            let density = match density {
                Ok(d) => d,
                Err(Error::Contract(_)) if trace.pattern_values(&g).iter().any(|p| !p.all_finite()) => {
                    return Err(Error::NumericalAbort {
                        epoch,
                        batch: bi,
                        task_loss: g.value(task).data()[0],
                        density_loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let loss = total_loss(&mut g, task, density, alpha)?;
            let (tv, dv) = (g.value(task).data()[0], g.value(density).data()[0]);
            if !tv.is_finite() || !dv.is_finite() || !g.value(loss).data()[0].is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: bi,
                    task_loss: tv,
                    density_loss: dv,
                });
            }
            task_sum += tv;
            dens_sum += dv;
            acc.observe(&trace.pattern_values(&g), &trace.mask)?;
            let grads = g.backward(loss)?;
            opt.begin_step();
            for (name, var) in out.bindings.iter() {
                let Some(grad) = grads.get(var) else { continue };
                if name == ADAPTIVE_PARAM {
                    if let Some(a) = state.adaptive.as_mut().filter(|a| a.trainable) {
                        opt.update(name, &mut a.values, grad)?;
                        a.clamp();
                    }
                    continue;
                }
                let store = if name.starts_with("peft.") {
                    &mut state.attachment.params
                } else {
                    &mut state.model.params
                };
                let p = store.get_mut(name)?;
                if p.trainable {
                    opt.update(name, p.value.data_mut(), grad)?;
                }
            }
        }
        let n = batches.len() as f64;
        log.push(EpochLog {
            epoch,
            task_loss: task_sum / n,
            density_loss: dens_sum / n,
            density_percent: acc.report()?.mean_density,
            adaptive_weights: state.adaptive.as_ref().map(|a| a.values.clone()),
        });
    }
    Ok(TrainOutcome {
        state,
        log,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticKind;
    use crate::experiment::Mode;
    use crate::model::ModelConfig;

    fn tiny(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                d_model: 8,
                d_ff: 16,
                vocab_size: 64,
                ..ModelConfig::default()
            },
            mode,
            epochs: 1,
            batch_size: 16,
            data: DataSource::Synthetic {
                kind: SyntheticKind::KeywordSentiment,
                train_size: 32,
                validation_size: 16,
                seed: 0,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let cfg = tiny(Mode::AdaDeft);
        let data = prepare_data(&cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        let ck = out.state.to_checkpoint(&cfg);
        let back = TrainedState::from_checkpoint(&cfg, &Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, out.state);
    }

    #[test]
    fn mismatched_checkpoint_is_version_error() {
        let cfg = tiny(Mode::Deft);
        let ck = TrainedState::init(&cfg).unwrap().to_checkpoint(&cfg);
        let mut other = cfg.clone();
        other.model.d_ff = 32;
        assert!(matches!(TrainedState::from_checkpoint(&other, &ck), Err(Error::Version(_))));
    }

    #[test]
    fn adaptive_weights_stay_clamped() {
        let mut cfg = tiny(Mode::AdaDeft);
        cfg.optimizer.lr = Some(0.5);
        cfg.epochs = 2;
        let data = prepare_data(&cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        for e in &out.log {
            assert!(e.adaptive_weights.as_ref().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn vocabulary_must_fit_model() {
        let mut cfg = tiny(Mode::Deft);
        cfg.model.vocab_size = 10;
        assert!(matches!(prepare_data(&cfg), Err(Error::Config(_))));
    }
}
