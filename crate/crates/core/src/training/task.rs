use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::lr::LrSchedule;
use super::optim::{AdamW, AdamWConfig};
use crate::data::{Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::nets::{Mode, ModuleGraph, BN_MOMENTUM};
use crate::seed;
use crate::tensor::{Graph, IGNORE_INDEX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy over scored targets.
    pub loss: f64,
    /// Accuracy in [0, 1] for classification, perplexity for sequences.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
}

/// Inference-mode loss and accuracy/perplexity over a split.
pub fn evaluate(model: &ModuleGraph, split: &Split, task: TaskKind, batch_size: usize) -> Result<EvalMetrics> {
    let n = split.len();
    let (mut loss, mut count, mut correct) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (inp, targets) = split.batch(chunk);
        let logits = model.logits(&inp)?;
        let c = logits.shape()[1];
        for (row, &t) in logits.data().chunks(c).zip(&targets) {
            if t == IGNORE_INDEX {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            correct += (arg == t) as usize;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no scored targets in split".into()));
    }
    let mean = loss / count as f64;
    Ok(EvalMetrics {
        loss: mean,
        metric: match task {
            TaskKind::Classification => correct as f64 / count as f64,
            TaskKind::Sequence => mean.exp(),
        },
    })
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => Error::Diverged {
            stage: 0,
            detail: format!("task training: {e}"),
        },
        other => other,
    }
}

/// Cross-entropy training of every parameter; keeps the epoch with the
/// lowest validation loss.
pub fn task_train(model: &mut ModuleGraph, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TaskOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidSpec("task training needs at least one epoch".into()));
    }
    model.set_all_frozen(false);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = seed::rng(seed, "task-shuffle");
    let n = data.train.len();
    let bs = cfg.batch_size.clamp(2, n.max(2));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModuleGraph)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.epochs);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in idx.chunks(bs).filter(|c| c.len() >= 2) {
            let (inp, targets) = data.train.batch(chunk);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &inp, Mode::Train).map_err(divergence)?;
            let loss = g.cross_entropy(out.logits.expect("head"), &targets)?;
            total += g.value(loss).item();
            let mut grads = g.backward(loss).map_err(divergence)?;
            opt.step(model, &mut grads, lr).map_err(divergence)?;
            model.apply_bn_updates(&out.bn_updates, BN_MOMENTUM);
            batches += 1;
        }
        let val = evaluate(model, &data.val, data.task, bs)?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged {
                stage: 0,
                detail: format!("validation loss {} at epoch {epoch}", val.loss),
            });
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss: val.loss,
            val_metric: val.metric,
            lr,
        });
        if best.as_ref().map_or(true, |(l, _, _)| val.loss < *l) {
            best = Some((val.loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, kept) = best.expect("at least one epoch");
    *model = kept;
    Ok(TaskOutcome {
        history,
        best_epoch,
        val: evaluate(model, &data.val, data.task, bs)?,
        test: evaluate(model, &data.test, data.task, bs)?,
    })
}
