//! Learning-rate plateau reduction and early stopping.

/// Multiplies the learning rate by `factor` whenever the monitored
/// validation loss fails to improve for `patience` consecutive epochs.
///
/// Improvement means `val < best - threshold` (strict, with a small slack so
/// float dust does not count). The reduction fires on the epoch that brings
/// the stale count up to `patience`, and the counter resets afterwards, so a
/// flat metric with patience 2 yields the lr trace
/// `[lr, lr, 0.1*lr, 0.1*lr, 0.01*lr]` over five epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        assert!(lr > 0.0, "lr must be positive");
        assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0,1)");
        assert!(patience >= 1, "patience must be at least 1");
        PlateauScheduler {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Observe one epoch's validation loss; returns the lr to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Larger metric is better (accuracy).
    Max,
    /// Smaller metric is better (loss).
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopUpdate {
    pub improved: bool,
    pub stopped: bool,
}

/// Stops training once the monitored metric has gone `patience + 1`
/// consecutive epochs without a strict improvement: one stale epoch per unit
/// of patience plus the observation that triggers the stop. A constant
/// metric with patience 7 therefore stops at epoch 9 (1 best + 7 stale + 1
/// trigger).
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    mode: Mode,
    best: f64,
    stale: usize,
    stopped: bool,
}

impl EarlyStop {
    pub fn new(patience: usize, mode: Mode) -> Self {
        let best = match mode {
            Mode::Max => f64::NEG_INFINITY,
            Mode::Min => f64::INFINITY,
        };
        EarlyStop { patience, mode, best, stale: 0, stopped: false }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, metric: f64) -> StopUpdate {
        let improved = match self.mode {
            Mode::Max => metric > self.best,
            Mode::Min => metric < self.best,
        };
        if improved {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.stopped = true;
            }
        }
        StopUpdate { improved, stopped: self.stopped }
    }
}
