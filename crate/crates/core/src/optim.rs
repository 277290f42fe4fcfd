//! Gradient-descent optimizers and early stopping.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
/// Decay of the running averages in RMSProp and Adadelta.
pub const RHO: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adagrad,
    Adadelta,
    Rmsprop,
}

impl OptimizerKind {
    /// Optimizers of the hyperparameter grid (plain SGD is kept for tests).
    pub const GRID: [OptimizerKind; 4] = [Self::Adam, Self::Adagrad, Self::Adadelta, Self::Rmsprop];

    fn slots(self) -> usize {
        match self {
            Self::Sgd => 0,
            Self::Adagrad | Self::Rmsprop => 1,
            Self::Adam | Self::Adadelta => 2,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::Adagrad => "adagrad",
            Self::Adadelta => "adadelta",
            Self::Rmsprop => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adagrad" => Ok(Self::Adagrad),
            "adadelta" => Ok(Self::Adadelta),
            "rmsprop" => Ok(Self::Rmsprop),
            _ => Err(Error::UnknownKind {
                what: "optimizer",
                name: s.to_string(),
            }),
        }
    }
}

/// Optimizer with per-parameter state slots.
///
/// Slots hold, per kind: Adam `[m, v]`; Adagrad `[Σg²]`; RMSProp `[E[g²]]`;
/// Adadelta `[E[g²], E[Δx²]]`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    slots: HashMap<String, Vec<Vec<f64>>>,
}

impl OptimizerState {
    /// Allocates zeroed slots for every parameter in `params`. A zero
    /// learning rate is accepted and leaves parameters unchanged.
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {learning_rate}")));
        }
        let slots = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![vec![0.0; t.len()]; kind.slots()]))
            .collect();
        Ok(Self {
            kind,
            learning_rate,
            step_count: 0,
            slots,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Nothing is modified when an error is returned.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !self.slots.contains_key(name) {
                return Err(Error::MissingSlot(name.clone()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("gradient for unknown parameter `{name}`"))),
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.learning_rate;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let slots = self.slots.get_mut(name).expect("checked above");
            let x = p.data_mut();
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = slots.split_at_mut(1);
                    let (m, v) = (&mut m[0], &mut v[0]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..x.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        x[i] -= lr * mh / (vh.sqrt() + EPSILON);
                    }
                }
                OptimizerKind::Adagrad => {
                    let acc = &mut slots[0];
                    for i in 0..x.len() {
                        acc[i] += g[i] * g[i];
                        x[i] -= lr * g[i] / (acc[i].sqrt() + EPSILON);
                    }
                }
                OptimizerKind::Rmsprop => {
                    let avg = &mut slots[0];
                    for i in 0..x.len() {
                        avg[i] = RHO * avg[i] + (1.0 - RHO) * g[i] * g[i];
                        x[i] -= lr * g[i] / (avg[i].sqrt() + EPSILON);
                    }
                }
                OptimizerKind::Adadelta => {
                    let (eg, edx) = slots.split_at_mut(1);
                    let (eg, edx) = (&mut eg[0], &mut edx[0]);
                    for i in 0..x.len() {
                        eg[i] = RHO * eg[i] + (1.0 - RHO) * g[i] * g[i];
                        let dx = -((edx[i] + EPSILON).sqrt() / (eg[i] + EPSILON).sqrt()) * g[i];
                        edx[i] = RHO * edx[i] + (1.0 - RHO) * dx * dx;
                        x[i] += lr * dx;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Minimum change that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Patience-based early stopping over a per-epoch validation metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    patience: usize,
    mode: StopMode,
    best_metric: f64,
    best_epoch: usize,
    epochs_since_improve: usize,
    last_epoch: Option<usize>,
}

impl EarlyStopState {
    pub fn new(patience: usize, mode: StopMode) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        let best_metric = match mode {
            StopMode::Minimize => f64::INFINITY,
            StopMode::Maximize => f64::NEG_INFINITY,
        };
        Ok(Self {
            patience,
            mode,
            best_metric,
            best_epoch: 0,
            epochs_since_improve: 0,
            last_epoch: None,
        })
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_improve(&self) -> usize {
        self.epochs_since_improve
    }

    /// True when the most recent observation became the new best.
    pub fn improved_last(&self) -> bool {
        self.last_epoch.is_some() && self.epochs_since_improve == 0
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Result<StopDecision> {
        if let Some(last) = self.last_epoch {
            if epoch <= last {
                return Err(Error::EpochOutOfOrder { last, got: epoch });
            }
        }
        self.last_epoch = Some(epoch);
        let improved = match self.mode {
            StopMode::Minimize => metric < self.best_metric - MIN_IMPROVEMENT,
            StopMode::Maximize => metric > self.best_metric + MIN_IMPROVEMENT,
        };
        if improved || self.best_metric.is_infinite() {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            return Ok(StopDecision::Continue);
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve >= self.patience {
            Ok(StopDecision::Stop {
                best_epoch: self.best_epoch,
            })
        } else {
            Ok(StopDecision::Continue)
        }
    }
}
