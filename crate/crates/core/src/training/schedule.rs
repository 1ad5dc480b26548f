use serde::{Deserialize, Serialize};

/// Quantity that drives early stopping and learning-rate decay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValidLoss,
    ValidAuroc,
}

/// Outcome of observing one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub next_lr: f64,
}

/// Early stopping plus step decay on plateau, both counting consecutive
/// epochs without an improvement of at least `min_delta`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    monitor: Monitor,
    min_delta: f64,
    stop_patience: usize,
    lr_patience: usize,
    decay: f64,
    lr: f64,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    since_decay: usize,
}

impl PlateauSchedule {
    pub fn new(monitor: Monitor, lr: f64, decay: f64, lr_patience: usize, stop_patience: usize, min_delta: f64) -> Self {
        PlateauSchedule {
            monitor,
            min_delta,
            stop_patience,
            lr_patience,
            decay,
            lr,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// 1-based epoch of the best value so far; ties keep the earliest.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Observation {
        let score = match self.monitor {
            Monitor::ValidLoss => value,
            Monitor::ValidAuroc => -value,
        };
        let improved = score < self.best - self.min_delta;
        if improved {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
            if self.since_decay >= self.lr_patience {
                self.lr *= self.decay;
                self.since_decay = 0;
            }
        }
        Observation {
            improved,
            stop: self.since_best >= self.stop_patience,
            next_lr: self.lr,
        }
    }
}
