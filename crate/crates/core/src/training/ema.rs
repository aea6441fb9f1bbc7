use serde::{Deserialize, Serialize};

use super::lr::PlateauController;
use super::Event;
use super::StopReason;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaConfig {
    /// Averaging window in steps; the decay is `2 / (window + 1)`.
    pub window: usize,
    pub threshold: f64,
    pub max_epochs: usize,
    /// Epochs without improvement of the epoch-end EMA before a reduction.
    pub patience: usize,
    pub factor: f64,
    pub rel_threshold: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            window: 500,
            threshold: 0.01,
            max_epochs: 100,
            patience: 4,
            factor: 0.1,
            rel_threshold: 1e-4,
        }
    }
}

impl EmaConfig {
    pub fn alpha(&self) -> f64 {
        2.0 / (self.window as f64 + 1.0)
    }
}

/// Loss-stream automation: EMA stop rule plus plateau lr reduction on
/// epoch-boundary snapshots. Its decisions depend on nothing but the
/// stream it is fed.
#[derive(Clone, Debug)]
pub struct EmaController {
    config: EmaConfig,
    ema: Option<f64>,
    step: usize,
    epoch: usize,
    plateau: PlateauController,
    stopped: bool,
}

impl EmaController {
    pub fn new(config: EmaConfig, lr: f64) -> Self {
        let plateau = PlateauController::new(lr, config.patience, config.factor, config.rel_threshold);
        Self {
            config,
            ema: None,
            step: 0,
            epoch: 0,
            plateau,
            stopped: false,
        }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    pub fn lr(&self) -> f64 {
        self.plateau.lr()
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Feeds one step's loss.
    pub fn observe(&mut self, loss: f64) -> Option<Event> {
        if self.stopped {
            return None;
        }
        self.step += 1;
        let a = self.config.alpha();
        let e = match self.ema {
            None => loss,
            Some(prev) => (1.0 - a) * prev + a * loss,
        };
        self.ema = Some(e);
        if e < self.config.threshold {
            self.stopped = true;
            return Some(Event::Stop {
                epoch: self.epoch,
                step: self.step,
                reason: StopReason::Threshold,
            });
        }
        None
    }

    /// Closes the current epoch: plateau check, then the epoch cap.
    pub fn end_epoch(&mut self) -> Vec<Event> {
        if self.stopped {
            return vec![];
        }
        let mut out = Vec::new();
        if let Some(e) = self.ema {
            if let Some((from, to)) = self.plateau.observe(e) {
                out.push(Event::LrReduced {
                    epoch: self.epoch,
                    step: self.step,
                    from,
                    to,
                });
            }
        }
        self.epoch += 1;
        if self.epoch >= self.config.max_epochs {
            self.stopped = true;
            out.push(Event::Stop {
                epoch: self.epoch - 1,
                step: self.step,
                reason: StopReason::EpochCap,
            });
        }
        out
    }

    /// Replays a recorded stream (one loss list per epoch) and returns every
    /// event in order.
    pub fn replay(config: &EmaConfig, lr: f64, epochs: &[Vec<f64>]) -> Vec<Event> {
        let mut c = EmaController::new(config.clone(), lr);
        let mut out = Vec::new();
        for losses in epochs {
            for &l in losses {
                out.extend(c.observe(l));
            }
            out.extend(c.end_epoch());
            if c.stopped() {
                break;
            }
        }
        out
    }
}
