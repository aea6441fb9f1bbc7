//! Optimizers, learning-rate control, alignment stages, normalization
//! handling, task training and the baselines.

mod align;
mod baselines;
mod bn;
mod ema;
mod lr;
mod metrics;
mod optim;
mod task;

use serde::{Deserialize, Serialize};

pub use align::{
    align_stage, auto_align_stage, evaluate_plan, AlignConfig, Routing, StagePlan, StageReport, StepRecord, TapCache,
};
pub use baselines::{distill_loss, distill_loss_var, naive_baseline, progressive_distill, DistillConfig};
pub use bn::{freeze_bn, recalibrate_bn};
pub use ema::{EmaConfig, EmaController};
pub use lr::{LrSchedule, PlateauController};
pub use metrics::{write_metrics_csv, MetricRow};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, ClipInfo, ParamStore};
pub use task::{evaluate, task_train, EpochMetrics, EvalMetrics, TaskOutcome, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    EpochCap,
}

/// Controller and recovery events. `epoch` is 0-based; `step` counts
/// observed steps from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    LrReduced {
        epoch: usize,
        step: usize,
        from: f64,
        to: f64,
    },
    Stop {
        epoch: usize,
        step: usize,
        reason: StopReason,
    },
    /// The stage was restarted from its initial parameters at a lower rate.
    Restart { lr_scale: f64, cause: String },
}
