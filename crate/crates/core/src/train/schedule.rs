/// Reduce-on-plateau learning rate plus early stopping, both keyed on the
/// validation loss. An epoch improves only if its loss is strictly below
/// the best so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    since_best: usize,
    since_change: usize,
}

/// What the schedule decided after one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub improved: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub reduced: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(lr: f64, factor: f64, plateau_patience: usize, early_stop_patience: usize) -> Self {
        Self {
            lr,
            factor,
            plateau_patience,
            early_stop_patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
            since_change: 0,
        }
    }

    /// Records the validation loss of `epoch`. After `plateau_patience`
    /// non-improving epochs the rate is multiplied by `factor` and the
    /// plateau counter restarts; `early_stop_patience` non-improving epochs
    /// after the best one end the run.
    pub fn step(&mut self, epoch: usize, val_loss: f64) -> Step {
        let improved = val_loss < self.best;
        let mut reduced = false;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            self.since_change = 0;
        } else {
            self.since_best += 1;
            self.since_change += 1;
            if self.since_change >= self.plateau_patience {
                self.lr *= self.factor;
                self.since_change = 0;
                reduced = true;
            }
        }
        Step { improved, lr: self.lr, reduced, stop: self.since_best >= self.early_stop_patience }
    }
}
