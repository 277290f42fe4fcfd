//! Mini-batch training with early stopping on validation loss, and model
//! evaluation on corpus splits.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::captioner::{CaptionerModel, Task, NEURON_GRID};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::metrics::{caption_report, classification_report, EvalReport};
use crate::optim::{EarlyStopState, OptimizerKind, OptimizerState, StopDecision, StopMode};
use crate::synth::{AccessoryType, CaptionLevel, Sample, Split};

pub const BATCH_GRID: [usize; 6] = [4, 8, 16, 32, 128, 512];
pub const LEARNING_RATE_GRID: [f64; 4] = [0.0001, 0.001, 0.01, 0.1];
pub const DEFAULT_MAX_EPOCHS: usize = 200;
pub const DEFAULT_PATIENCE: usize = 10;
/// Batch size used for loss evaluation and decoding; does not affect
/// results, only memory.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub neurons: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// When false every epoch up to `max_epochs` runs; the best epoch is
    /// still tracked and restored.
    #[serde(default = "default_true")]
    pub early_stopping: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            neurons: 256,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            early_stopping: true,
            seed: 0,
        }
    }
}

impl HyperConfig {
    /// Basic sanity: positive batch and patience, finite non-negative rate.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.neurons == 0 {
            return Err(Error::Config("batch_size, patience and neurons must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate {} is not usable", self.learning_rate)));
        }
        Ok(())
    }

    /// Membership in the enumerated hyperparameter grids.
    pub fn validate_grid(&self) -> Result<()> {
        self.validate()?;
        if !NEURON_GRID.contains(&self.neurons) {
            return Err(Error::Config(format!("neurons {} not in {NEURON_GRID:?}", self.neurons)));
        }
        if !BATCH_GRID.contains(&self.batch_size) {
            return Err(Error::Config(format!("batch size {} not in {BATCH_GRID:?}", self.batch_size)));
        }
        if !OptimizerKind::GRID.contains(&self.optimizer) {
            return Err(Error::Config(format!("optimizer {} not in the grid", self.optimizer)));
        }
        if !LEARNING_RATE_GRID.contains(&self.learning_rate) {
            return Err(Error::Config(format!(
                "learning rate {} not in {LEARNING_RATE_GRID:?}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ccr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; 0 means the initial ones.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_loss: f64,
    pub val_ccr: f64,
    pub test: EvalReport,
    pub seconds: f64,
    pub hyper: HyperConfig,
    pub task: Task,
    pub level: CaptionLevel,
    pub checksum: String,
}

/// Encoded inputs and targets for one split.
pub struct Prepared {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<usize>>,
    pub types: Vec<AccessoryType>,
    pub references: Vec<String>,
}

impl Prepared {
    pub fn new(model: &CaptionerModel, samples: &[&Sample]) -> Result<Self> {
        let level = model.config().level;
        let mut p = Prepared {
            inputs: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            types: Vec::with_capacity(samples.len()),
            references: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            p.inputs.push(model.input_for(&s.id, &s.image)?);
            let reference = s.captions.get(level).to_string();
            p.targets.push(match model.config().task {
                Task::Captioning => model.vocab().encode(&reference)?,
                Task::Classification => vec![s.spec.accessory_type.index()],
            });
            p.types.push(s.spec.accessory_type);
            p.references.push(reference);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inputs and targets for the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Vec<&[f64]>, Vec<&[usize]>) {
        (
            idx.iter().map(|&i| self.inputs[i].as_slice()).collect(),
            idx.iter().map(|&i| self.targets[i].as_slice()).collect(),
        )
    }
}

/// Sample-weighted mean loss over a split.
pub fn mean_loss(model: &CaptionerModel, data: &Prepared) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        total += model.batch_loss(&x, &y)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Exact-match (captioning) or top-1 (classification) report.
pub fn evaluate(model: &CaptionerModel, data: &Prepared) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    match model.config().task {
        Task::Classification => {
            let mut predicted = Vec::with_capacity(data.len());
            for chunk in data.inputs.chunks(EVAL_CHUNK) {
                let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
                predicted.extend(model.classify_batch(&refs)?.iter().map(CaptionerModel::predict_class));
            }
            classification_report(&data.types, &predicted)
        }
        Task::Captioning => {
            let mut generated = Vec::with_capacity(data.len());
            for chunk in data.inputs.chunks(EVAL_CHUNK) {
                let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
                generated.extend(model.caption_batch(&refs)?);
            }
            let refs: Vec<&str> = data.references.iter().map(String::as_str).collect();
            caption_report(model.config().level, &data.types, &refs, &generated)
        }
    }
}

/// Evaluates a model on corpus samples.
pub fn evaluate_samples(model: &CaptionerModel, samples: &[&Sample]) -> Result<EvalReport> {
    evaluate(model, &Prepared::new(model, samples)?)
}

/// Exact-match caption accuracy at the model's level.
pub fn eval_caption_exact(model: &CaptionerModel, samples: &[&Sample]) -> Result<EvalReport> {
    if model.config().task != Task::Captioning {
        return Err(Error::TaskMismatch("exact-match evaluation needs a captioning model".into()));
    }
    evaluate_samples(model, samples)
}

pub fn eval_classification(model: &CaptionerModel, samples: &[&Sample]) -> Result<EvalReport> {
    if model.config().task != Task::Classification {
        return Err(Error::TaskMismatch("classification evaluation needs a classification model".into()));
    }
    evaluate_samples(model, samples)
}

fn diverged(epoch: usize, source: Error) -> Error {
    Error::Diverged {
        epoch,
        source: Box::new(source),
    }
}

/// Trains `model` in place and leaves it holding the best-epoch
/// parameters. Each epoch shuffles the training split with a seed derived
/// from `(hyper.seed, epoch)`, takes one optimizer step per mini-batch,
/// then records validation loss and CCR. Early stopping watches the
/// validation loss.
pub fn train(model: &mut CaptionerModel, samples: &[Sample], hyper: &HyperConfig) -> Result<TrainReport> {
    train_with(model, samples, hyper, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    model: &mut CaptionerModel,
    samples: &[Sample],
    hyper: &HyperConfig,
    mut on_epoch: F,
) -> Result<TrainReport> {
    hyper.validate()?;
    if hyper.neurons != model.config().neurons {
        return Err(Error::Config(format!(
            "hyper config asks for {} neurons, model has {}",
            hyper.neurons,
            model.config().neurons
        )));
    }
    let start = Instant::now();
    let split = |s: Split| samples.iter().filter(|x| x.split == s).collect::<Vec<_>>();
    let (train_s, val_s, test_s) = (split(Split::Train), split(Split::Val), split(Split::Test));
    for (name, set) in [("training split", &train_s), ("validation split", &val_s), ("test split", &test_s)] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} is empty")));
        }
    }
    let train_d = Prepared::new(model, &train_s)?;
    let val_d = Prepared::new(model, &val_s)?;
    let test_d = Prepared::new(model, &test_s)?;

    let mut optimizer = OptimizerState::new(hyper.optimizer, hyper.learning_rate, model.params())?;
    let mut stopper = EarlyStopState::new(hyper.patience, StopMode::Minimize)?;
    let mut best: ParamStore = model.params().clone();
    let mut best_val = (mean_loss(model, &val_d)?, evaluate(model, &val_d)?.ccr);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_d.len()).collect();

    for epoch in 1..=hyper.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[hyper.seed, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let (x, y) = train_d.batch(batch);
            let (loss, grads) = model.loss_and_grads(&x, &y).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(diverged(epoch, Error::NonFinite { op: "training loss" }));
            }
            optimizer.step(model.params_mut(), &grads).map_err(|e| diverged(epoch, e))?;
            total += loss * batch.len() as f64;
        }
        let val_loss = mean_loss(model, &val_d).map_err(|e| diverged(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, Error::NonFinite { op: "validation loss" }));
        }
        let val_ccr = evaluate(model, &val_d)?.ccr;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_d.len() as f64,
            val_loss,
            val_ccr,
        };
        on_epoch(&record);
        epochs.push(record);
        let decision = stopper.observe(epoch, val_loss)?;
        if stopper.improved_last() {
            best = model.params().clone();
            best_val = (val_loss, val_ccr);
        }
        if hyper.early_stopping && matches!(decision, StopDecision::Stop { .. }) {
            stopped_early = true;
            break;
        }
    }

    *model.params_mut() = best;
    let test = evaluate(model, &test_d)?;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        val_loss: best_val.0,
        val_ccr: best_val.1,
        test,
        seconds: start.elapsed().as_secs_f64(),
        hyper: hyper.clone(),
        task: model.config().task,
        level: model.config().level,
        checksum: model.checksum(),
    })
}

/// Last epoch whose validation loss beat every earlier one by more than
/// `min_delta`; after it the curve has plateaued.
pub fn plateau_epoch(epochs: &[EpochRecord], min_delta: f64) -> usize {
    let mut best = f64::INFINITY;
    let mut at = 0;
    for e in epochs {
        if e.val_loss < best - min_delta {
            best = e.val_loss;
            at = e.epoch;
        }
    }
    at
}
