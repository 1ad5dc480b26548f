//! Adam training with early stopping and plateau learning-rate decay, and the
//! independent multi-run protocol.

mod adam;
mod schedule;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use schedule::{Monitor, Observation, PlateauSchedule};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationPolicy, Sample, SplitSamples};
use crate::error::{Error, Result};
use crate::evaluation::{auroc, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{predict_proba, Model, ModelSpec};
use crate::tensor::{kernels, Tape, Tensor};
use crate::transfer::{load_with_new_head, splitmix64, WeightArchive};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
    /// Minimum absolute change that counts as an improvement.
    pub min_delta: f64,
    /// Parameter-owning layers excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.00977,
            batch_size: 8,
            max_epochs: 15,
            early_stop_patience: 3,
            lr_decay_factor: 0.4,
            lr_patience: 1,
            seed: 0,
            monitor: Monitor::ValidLoss,
            min_delta: 1e-6,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && self.early_stop_patience >= 1
            && self.lr_patience >= 1
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor <= 1.0
            && self.min_delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }

    fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule::new(
            self.monitor,
            self.learning_rate,
            self.lr_decay_factor,
            self.lr_patience,
            self.early_stop_patience,
            self.min_delta,
        )
    }

    fn is_frozen(&self, param: &str) -> bool {
        let layer = param.rsplit_once('.').map_or(param, |(l, _)| l);
        self.frozen.iter().any(|f| f == layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_auroc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub best_weights: WeightArchive,
    pub epoch_log: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

/// Mean binary cross-entropy and AUROC of eval-mode predictions.
pub fn validation_metrics(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let logits: Vec<f64> = samples
        .par_iter()
        .map(|s| model.logit(&s.image, &s.static_features))
        .collect::<Result<_>>()?;
    let loss = logits
        .iter()
        .zip(samples)
        .map(|(&z, s)| {
            let y = f64::from(s.label);
            y * kernels::softplus(-z) + (1.0 - y) * kernels::softplus(z)
        })
        .sum::<f64>()
        / samples.len() as f64;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok((loss, auroc(&logits, &labels)?))
}

fn batch_gradients(
    model: &Model,
    batch: &[Sample],
    config: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.bind_selective(&mut tape, |name| !config.is_frozen(name));
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let x = tape.constant(s.image.clone());
        let st = tape.constant(Tensor::from_vec(s.static_features.to_vec()));
        let logit = model.forward_on(&mut tape, &bound, x, st, true, dropout_rng)?;
        losses.push(tape.bce_with_logits(logit, f64::from(s.label))?);
    }
    let loss = tape.mean(&losses)?;
    let grads = tape.backward(loss)?;
    let named = bound
        .iter()
        .filter(|(name, _)| !config.is_frozen(name))
        .map(|(name, var)| (name.to_string(), grads.wrt(var)))
        .collect();
    Ok((tape.value(loss).data()[0], named))
}

/// Trains `model` in place and leaves it holding the best-epoch weights (as
/// stored in the returned archive, i.e. rounded to binary32).
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    valid: &[Sample],
    config: &TrainConfig,
    augmentation: Option<&AugmentationPolicy>,
) -> Result<RunResult> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    let positives = valid.iter().filter(|s| s.label == 1).count();
    if positives == 0 || positives == valid.len() {
        return Err(Error::Metric("validation set must contain both classes".into()));
    }
    if let Some(policy) = augmentation {
        policy.validate()?;
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5348_5546));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x4452_4f50));
    let mut schedule = config.schedule();
    let mut adam = AdamState::new();
    let mut log = Vec::new();
    let mut best: Option<WeightArchive> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_epoch = config.max_epochs;

    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| match augmentation {
                    Some(p) => augment(&train[i], p, epoch as u64),
                    None => Ok(train[i].clone()),
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(model, &batch, config, &mut dropout_rng)?;
            adam_step(model.params_map_mut(), &grads, &mut adam, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (valid_loss, valid_auroc) = validation_metrics(model, valid)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_loss,
            valid_auroc,
            lr,
        });
        let monitored = match config.monitor {
            Monitor::ValidLoss => valid_loss,
            Monitor::ValidAuroc => valid_auroc,
        };
        let obs = schedule.observe(epoch, monitored);
        if obs.improved {
            best = Some(WeightArchive::from_model(model)?);
        }
        if obs.stop {
            stopped_epoch = epoch;
            break;
        }
    }

    let best_weights = best.expect("first epoch always improves");
    *model = best_weights.to_model(model.spec().clone())?;
    Ok(RunResult {
        best_weights,
        epoch_log: log,
        stopped_epoch,
        best_epoch: schedule.best_epoch(),
    })
}

/// Writes one JSON object per epoch.
pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec).expect("epoch record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub result: Result<(RunResult, MetricsReport)>,
}

/// Test-set metrics of `model` at the default 0.5 threshold.
pub fn test_report(model: &Model, test: &[Sample]) -> Result<MetricsReport> {
    let probs = predict_proba(model, test)?;
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    MetricsReport::compute(&probs, &labels, DEFAULT_THRESHOLD)
}

/// Independent runs; run `i` uses seed `config.seed + i` for initialization,
/// shuffling, dropout and augmentation. With an archive, each run starts from
/// the transferred weights plus a fresh head. Failed runs are reported in
/// place; results are ordered by run index.
pub fn multi_run(
    spec: &ModelSpec,
    data: &SplitSamples,
    config: &TrainConfig,
    augmentation: Option<&AugmentationPolicy>,
    n_runs: usize,
    transfer: Option<&WeightArchive>,
) -> Result<Vec<RunOutcome>> {
    if n_runs < 2 {
        return Err(Error::Config(format!("multi-run needs at least 2 runs, got {n_runs}")));
    }
    spec.layout()?;
    Ok((0..n_runs)
        .into_par_iter()
        .map(|run| {
            let seed = config.seed.wrapping_add(run as u64);
            let run_config = TrainConfig {
                seed,
                ..config.clone()
            };
            let policy = augmentation.map(|p| AugmentationPolicy {
                seed: p.seed.wrapping_add(run as u64),
                ..p.clone()
            });
            let result = (|| {
                let mut model = match transfer {
                    Some(archive) => load_with_new_head(archive, spec.clone(), seed)?,
                    None => Model::build(spec.clone(), seed)?,
                };
                let result = fit(&mut model, &data.train, &data.valid, &run_config, policy.as_ref())?;
                let report = test_report(&model, &data.test)?;
                Ok((result, report))
            })();
            RunOutcome { run, seed, result }
        })
        .collect())
}
