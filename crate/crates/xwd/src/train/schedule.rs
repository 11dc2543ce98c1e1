//! Learning-rate schedule and early stopping.

/// Cosine-annealed learning rate at epoch index `t` (0-based) of `total`
/// epochs: `lr·(1 + cos(π·t/total))/2`. Starts at `lr` and decays to 0 at
/// `t = total`.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    assert!(total > 0, "schedule needs at least one epoch");
    let frac = t as f64 / total as f64;
    base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Early stopping on validation loss with strict improvement.
///
/// An epoch improves when its loss beats the best seen by more than 1e-6;
/// after `patience` consecutive non-improving epochs the loop stops. The
/// caller snapshots the model whenever `observe` reports an improvement, so
/// the returned checkpoint is always the best-validation-loss epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improve: usize,
}

const MIN_DELTA: f64 = 1e-6;

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improve: 0,
        }
    }

    /// Records one epoch's validation loss; returns
    /// `(improved, should_stop)`. `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best - MIN_DELTA;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        (improved, self.since_improve >= self.patience)
    }

    /// Epoch (1-based) of the best validation loss so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
