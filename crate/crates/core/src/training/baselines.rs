use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::align::{AlignConfig, StageReport, StepRecord};
use super::optim::AdamW;
use super::task::{task_train, TaskOutcome, TrainConfig};
use crate::conversion::{guarded_stage, prepare_stage, ReplacementMapping, Schedule, ScheduleKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Input, Mode, ModuleGraph, BN_MOMENTUM};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};

/// Target architecture trained from scratch on the task, no alignment.
pub fn naive_baseline(
    guide: &ModuleGraph,
    mapping: &ReplacementMapping,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModuleGraph, TaskOutcome)> {
    let mut model = mapping.target_architecture(guide, seed, true)?;
    let outcome = task_train(&mut model, data, cfg, seed)?;
    Ok((model, outcome))
}

fn softmax_rows(logits: &Tensor, t: f64) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| ((v - max) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// `T² · mean_rows KL(softmax(guide/T) ‖ softmax(student/T))` with the guide
/// logits held constant.
pub fn distill_loss_var(g: &mut Graph, student: Var, guide: &Tensor, t: f64) -> Result<Var> {
    if g.shape(student) != guide.shape() || guide.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            detail: format!("student {:?} vs guide {:?}", g.shape(student), guide.shape()),
        });
    }
    let n = guide.shape()[0] as f64;
    let p = softmax_rows(guide, t);
    let entropy_term: f64 = p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
    let pv = g.constant(Tensor::new(guide.shape().to_vec(), p)?);
    let s = g.scale(student, 1.0 / t)?;
    let logq = g.log_softmax(s)?;
    let cross = g.mul(pv, logq)?;
    let cross = g.sum(cross)?;
    let kl = g.scale(cross, -t * t / n)?;
    g.shift(kl, t * t * entropy_term / n)
}

pub fn distill_loss(student: &Tensor, guide: &Tensor, t: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = distill_loss_var(&mut g, s, guide, t)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub align: AlignConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    2.0
}

/// Guide logits per sample, flattened so rows can be selected by sample.
fn guide_logits(guide: &ModuleGraph, pool: &Input) -> Result<(Tensor, usize)> {
    let n = pool.len();
    let idx: Vec<usize> = (0..n).collect();
    let (mut data, mut c) = (Vec::new(), 0);
    for chunk in idx.chunks(256) {
        let l = guide.logits(&pool.select(chunk))?;
        c = l.shape()[1];
        data.extend_from_slice(l.data());
    }
    let per = data.len() / n.max(1);
    Ok((Tensor::new(vec![n, per], data)?, c))
}

/// Stage-by-stage training of the replaced slots against the guide's
/// temperature-softened logits; no representational loss.
pub fn progressive_distill(
    guide: &ModuleGraph,
    mapping: &ReplacementMapping,
    schedule: &Schedule,
    data: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(ModuleGraph, Vec<StageReport>)> {
    if schedule.kind == ScheduleKind::GroupProgressive || mapping.is_grouped() {
        return Err(Error::Unsupported(
            "distillation needs a shape-compatible hybrid; grouped mappings have none".into(),
        ));
    }
    let pool = data.alignment_inputs();
    let (cached, classes) = guide_logits(guide, pool)?;
    let n = pool.len();
    let bs = cfg.align.batch_size.clamp(2, n.max(2));
    let mut model = guide.clone();
    let (mut placed, mut pinned) = (BTreeSet::new(), BTreeSet::new());
    let mut reports = Vec::new();
    for t in 1..=schedule.len() {
        let set = schedule.stage(t)?.to_vec();
        prepare_stage(&mut model, guide, mapping, &set, &mut placed, &mut pinned, seed)?;
        let report = guarded_stage(&mut model, t, |m, scale| {
            let schedule_lr = cfg.align.schedule.scaled(scale);
            let epochs = cfg.align.epochs;
            let mut opt = AdamW::new(cfg.align.optimizer.clone());
            let mut rng = seed::rng(seed, &format!("distill-stage{t}"));
            let mut records = Vec::new();
            let mut step = 0;
            for epoch in 0..epochs {
                let lr = schedule_lr.lr_at(epoch, epochs);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(bs).filter(|c| c.len() == bs) {
                    let mut g = Graph::new();
                    let out = m.forward(&mut g, &pool.select(chunk), Mode::Train)?;
                    let target = cached.select_rows(chunk);
                    let rows = target.len() / classes;
                    let target = target.reshape(&[rows, classes])?;
                    let loss = distill_loss_var(&mut g, out.logits.expect("head"), &target, cfg.temperature)?;
                    let mut grads = g.backward(loss)?;
                    if !grads.is_empty() {
                        opt.step(m, &mut grads, lr)?;
                    }
                    m.apply_bn_updates(&out.bn_updates, BN_MOMENTUM);
                    step += 1;
                    records.push(StepRecord {
                        stage: t,
                        epoch,
                        step,
                        per_layer_loss: vec![g.value(loss).item()],
                        lr,
                        events: vec![],
                    });
                }
            }
            let logits = m.logits(pool)?;
            let full = cached.clone().reshape(&[logits.shape()[0], classes])?;
            let final_loss = distill_loss(&logits, &full, cfg.temperature)?;
            Ok(StageReport {
                stage: t,
                slots: set.clone(),
                guide_slots: set.clone(),
                records,
                final_per_layer: vec![final_loss],
                epochs,
                events: vec![],
            })
        })?;
        reports.push(report);
    }
    model.set_all_frozen(false);
    Ok((model, reports))
}
