use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ema::{EmaConfig, EmaController};
use super::lr::LrSchedule;
use super::optim::{AdamW, AdamWConfig};
use super::Event;
use crate::error::{Error, Result};
use crate::nets::{Input, Mode, ModuleGraph, BN_MOMENTUM};
use crate::seed;
use crate::similarity::{dissimilarity_var, ActivationMatrix, MetricSpec};
use crate::tensor::{BnBatchStats, Graph, Tensor, Var};

/// Inference-mode guide activations over the whole alignment pool, keyed by
/// slot (0 is the stem output). Rows are samples, flattened.
#[derive(Clone, Debug)]
pub struct TapCache {
    taps: BTreeMap<usize, Tensor>,
    shapes: BTreeMap<usize, Vec<usize>>,
    n: usize,
}

impl TapCache {
    pub fn build(guide: &ModuleGraph, pool: &Input, slots: &[usize], chunk: usize) -> Result<Self> {
        let last = slots.iter().copied().max().unwrap_or(0);
        if last > guide.k() {
            return Err(Error::UnknownSlot(last));
        }
        let n = pool.len();
        let mut parts: BTreeMap<usize, Vec<f64>> = slots.iter().map(|&s| (s, Vec::new())).collect();
        let mut shapes = BTreeMap::new();
        let idx: Vec<usize> = (0..n).collect();
        for c in idx.chunks(chunk.max(1)) {
            let batch = pool.select(c);
            let mut g = Graph::new();
            let stem = guide.stem_forward(&mut g, &batch)?;
            let mut sink = Vec::new();
            let taps = if last > 0 {
                guide.run_slots(&mut g, stem, 1..=last, Mode::Eval, &mut sink)?
            } else {
                vec![]
            };
            for &s in slots {
                let v = if s == 0 { stem } else { taps[s - 1] };
                let t = g.value(v);
                shapes.entry(s).or_insert_with(|| t.shape()[1..].to_vec());
                parts.get_mut(&s).expect("requested").extend_from_slice(t.data());
            }
        }
        let taps = parts
            .into_iter()
            .map(|(s, d)| {
                let cols = d.len() / n.max(1);
                Ok((s, Tensor::new(vec![n, cols], d)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { taps, shapes, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn get(&self, slot: usize) -> Result<&Tensor> {
        self.taps
            .get(&slot)
            .ok_or_else(|| Error::InvalidSpec(format!("no cached guide tap for slot {slot}")))
    }

    /// Flattened rows `idx` of the tap at `slot`.
    pub fn rows(&self, slot: usize, idx: &[usize]) -> Result<ActivationMatrix> {
        ActivationMatrix::from_tensor(self.get(slot)?.select_rows(idx))
    }

    /// Rows `idx` of the tap at `slot` in the activation's own shape.
    pub fn batch(&self, slot: usize, idx: &[usize]) -> Result<Tensor> {
        let mut shape = vec![idx.len()];
        shape.extend(&self.shapes[&slot]);
        self.get(slot)?.select_rows(idx).reshape(&shape)
    }
}

/// Where a trained slot takes its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    /// The current hybrid forward pass.
    Hybrid,
    /// The guide's activation just below the matched guide slot.
    GuideInputs,
}

/// What one stage optimizes: `(model slot, guide slot)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: usize,
    pub pairs: Vec<(usize, usize)>,
    pub routing: Routing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Samples used for the final per-layer dissimilarities.
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
}

fn default_batch() -> usize {
    64
}

fn default_eval() -> usize {
    512
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub per_layer_loss: Vec<f64>,
    pub lr: f64,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Trained model slots, in the order of `per_layer_loss`.
    pub slots: Vec<usize>,
    pub guide_slots: Vec<usize>,
    pub records: Vec<StepRecord>,
    /// Inference-mode dissimilarity per trained slot after the stage.
    pub final_per_layer: Vec<f64>,
    pub epochs: usize,
    pub events: Vec<Event>,
}

impl StageReport {
    /// Unweighted mean of the final per-layer dissimilarities.
    pub fn final_loss(&self) -> f64 {
        self.final_per_layer.iter().sum::<f64>() / self.final_per_layer.len().max(1) as f64
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Forward for a stage plan; returns flattened `[b, d]` taps per pair.
fn plan_forward(
    g: &mut Graph,
    model: &ModuleGraph,
    cache: &TapCache,
    batch: &Input,
    idx: &[usize],
    plan: &StagePlan,
    mode: Mode,
    updates: &mut Vec<(String, BnBatchStats)>,
) -> Result<Vec<Var>> {
    let b = idx.len();
    let raw: Vec<Var> = match plan.routing {
        Routing::Hybrid => {
            let last = plan.pairs.iter().map(|p| p.0).max().unwrap_or(0);
            let stem = model.stem_forward(g, batch)?;
            let outs = model.run_slots(g, stem, 1..=last, mode, updates)?;
            plan.pairs.iter().map(|&(s, _)| outs[s - 1]).collect()
        }
        Routing::GuideInputs => {
            let mut v = Vec::with_capacity(plan.pairs.len());
            for &(s, gs) in &plan.pairs {
                let x = g.constant(cache.batch(gs - 1, idx)?);
                v.push(model.run_slots(g, x, s..=s, mode, updates)?[0]);
            }
            v
        }
    };
    raw.into_iter()
        .map(|t| {
            let d = g.value(t).len() / b;
            g.reshape(t, &[b, d])
        })
        .collect()
}

fn stage_losses(
    g: &mut Graph,
    model: &ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    idx: &[usize],
    plan: &StagePlan,
    metric: &MetricSpec,
    mode: Mode,
    updates: &mut Vec<(String, BnBatchStats)>,
) -> Result<Vec<Var>> {
    let batch = pool.select(idx);
    let taps = plan_forward(g, model, cache, &batch, idx, plan, mode, updates)?;
    let mut out = Vec::with_capacity(taps.len());
    for (t, &(_, gs)) in taps.into_iter().zip(&plan.pairs) {
        let guide = cache.rows(gs, idx)?;
        out.push(dissimilarity_var(g, metric, t, &guide)?);
    }
    Ok(out)
}

/// Inference-mode per-layer dissimilarity averaged over full batches of the
/// first `samples` pool rows.
pub fn evaluate_plan(
    model: &ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    plan: &StagePlan,
    metric: &MetricSpec,
    batch_size: usize,
    samples: usize,
) -> Result<Vec<f64>> {
    let n = samples.min(pool.len());
    let bs = batch_size.min(n);
    let idx: Vec<usize> = (0..n).collect();
    let mut sums = vec![0.0; plan.pairs.len()];
    let mut count = 0;
    for c in idx.chunks(bs).filter(|c| c.len() == bs) {
        let mut g = Graph::new();
        let mut sink = Vec::new();
        let losses = stage_losses(&mut g, model, cache, pool, c, plan, metric, Mode::Eval, &mut sink)?;
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += g.value(l).item();
        }
        count += 1;
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}

/// Learning-rate and stopping policy for a stage.
enum Control {
    Fixed { schedule: LrSchedule, epochs: usize },
    Auto(Box<EmaController>),
}

fn run_stage(
    model: &mut ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    plan: &StagePlan,
    metric: &MetricSpec,
    cfg: &AlignConfig,
    mut control: Control,
    seed: u64,
) -> Result<StageReport> {
    if plan.pairs.is_empty() {
        return Err(Error::InvalidSpec(format!("stage {} trains no slot", plan.stage)));
    }
    if cache.len() != pool.len() {
        return Err(Error::ShapeMismatch {
            op: "align_stage",
            detail: format!("{} cached rows for {} pool rows", cache.len(), pool.len()),
        });
    }
    let n = pool.len();
    let bs = cfg.batch_size.min(n);
    metric.validate(bs)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = seed::rng(seed, &format!("align-stage{}", plan.stage));
    let mut records = Vec::new();
    let mut events = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    loop {
        let lr = match &control {
            Control::Fixed { schedule, epochs } => {
                if epoch >= *epochs {
                    break;
                }
                schedule.lr_at(epoch, *epochs)
            }
            Control::Auto(c) => {
                if c.stopped() {
                    break;
                }
                c.lr()
            }
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(bs).filter(|c| c.len() == bs) {
            let mut g = Graph::new();
            let mut updates = Vec::new();
            let losses = stage_losses(
                &mut g,
                model,
                cache,
                pool,
                chunk,
                plan,
                metric,
                Mode::Train,
                &mut updates,
            )?;
            let per_layer: Vec<f64> = losses.iter().map(|&l| g.value(l).item()).collect();
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let mean = g.scale(total, 1.0 / losses.len() as f64)?;
            let mut grads = g.backward(mean)?;
            if !grads.is_empty() {
                opt.step(model, &mut grads, lr)?;
            }
            model.apply_bn_updates(&updates, BN_MOMENTUM);
            step += 1;
            let mut ev = Vec::new();
            if let Control::Auto(c) = &mut control {
                ev.extend(c.observe(g.value(mean).item()));
            }
            events.extend(ev.iter().cloned());
            records.push(StepRecord {
                stage: plan.stage,
                epoch,
                step,
                per_layer_loss: per_layer,
                lr,
                events: ev,
            });
            if matches!(&control, Control::Auto(c) if c.stopped()) {
                break;
            }
        }
        if let Control::Auto(c) = &mut control {
            let ev = c.end_epoch();
            if let Some(last) = records.last_mut() {
                last.events.extend(ev.iter().cloned());
            }
            events.extend(ev);
        }
        epoch += 1;
    }
    let final_per_layer = evaluate_plan(model, cache, pool, plan, metric, bs, cfg.eval_samples)?;
    Ok(StageReport {
        stage: plan.stage,
        slots: plan.pairs.iter().map(|p| p.0).collect(),
        guide_slots: plan.pairs.iter().map(|p| p.1).collect(),
        records,
        final_per_layer,
        epochs: epoch,
        events,
    })
}

/// Fixed-length alignment of the plan's slots: minimizes the mean
/// dissimilarity of the trained slots to their guide taps.
pub fn align_stage(
    model: &mut ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    plan: &StagePlan,
    metric: &MetricSpec,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<StageReport> {
    let control = Control::Fixed {
        schedule: cfg.schedule.clone(),
        epochs: cfg.epochs,
    };
    run_stage(model, cache, pool, plan, metric, cfg, control, seed)
}

/// Alignment driven by the EMA controller; starts at the schedule's peak
/// rate and ignores `cfg.epochs`.
pub fn auto_align_stage(
    model: &mut ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    plan: &StagePlan,
    metric: &MetricSpec,
    cfg: &AlignConfig,
    ema: &EmaConfig,
    seed: u64,
) -> Result<StageReport> {
    let control = Control::Auto(Box::new(EmaController::new(ema.clone(), cfg.schedule.peak())));
    run_stage(model, cache, pool, plan, metric, cfg, control, seed)
}
