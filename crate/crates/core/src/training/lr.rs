use serde::{Deserialize, Serialize};

/// Per-epoch learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup over `warmup` epochs to `lr_max`, then cosine decay to
    /// `final_ratio · lr_max` at the last epoch.
    WarmupCosine {
        lr_max: f64,
        warmup: usize,
        #[serde(default = "default_final_ratio")]
        final_ratio: f64,
    },
}

fn default_final_ratio() -> f64 {
    1e-3
}

impl LrSchedule {
    pub fn peak(&self) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::WarmupCosine { lr_max, .. } => *lr_max,
        }
    }

    /// Learning rate for 0-based `epoch` out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                lr_max,
                warmup,
                final_ratio,
            } => {
                if epoch < warmup {
                    return lr_max * (epoch + 1) as f64 / (warmup + 1) as f64;
                }
                let span = epochs.saturating_sub(1).saturating_sub(warmup);
                if span == 0 {
                    return lr_max;
                }
                let progress = ((epoch - warmup) as f64 / span as f64).min(1.0);
                let lo = lr_max * final_ratio;
                lo + (lr_max - lo) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Multiplies every rate by `s`.
    pub fn scaled(&self, s: f64) -> LrSchedule {
        match *self {
            LrSchedule::Constant { lr } => LrSchedule::Constant { lr: lr * s },
            LrSchedule::WarmupCosine {
                lr_max,
                warmup,
                final_ratio,
            } => LrSchedule::WarmupCosine {
                lr_max: lr_max * s,
                warmup,
                final_ratio,
            },
        }
    }
}

/// Reduce-on-plateau over a stream of per-epoch values. A value counts as
/// an improvement when it is below `best · (1 − rel_threshold)`; after
/// `patience` epochs without one the rate is multiplied by `factor` and
/// the count restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauController {
    pub patience: usize,
    pub factor: f64,
    pub rel_threshold: f64,
    lr: f64,
    best: f64,
    bad: usize,
}

impl PlateauController {
    pub fn new(lr: f64, patience: usize, factor: f64, rel_threshold: f64) -> Self {
        Self {
            patience,
            factor,
            rel_threshold,
            lr,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's value; returns `(old, new)` on a reduction.
    pub fn observe(&mut self, value: f64) -> Option<(f64, f64)> {
        if value < self.best * (1.0 - self.rel_threshold) {
            self.best = value;
            self.bad = 0;
            return None;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            let old = self.lr;
            self.lr *= self.factor;
            return Some((old, self.lr));
        }
        None
    }
}
