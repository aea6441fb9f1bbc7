use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::mapping::ReplacementMapping;
use super::schedule::{Schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nets::{Input, Mode, ModuleGraph, Origin};
use crate::similarity::MetricSpec;
use crate::tensor::{Graph, Tensor};
use crate::training::{align_stage, auto_align_stage, AlignConfig, EmaConfig, Event, StagePlan, StageReport, TapCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    pub align: AlignConfig,
    /// Per-stage epoch counts; missing entries use `align.epochs`.
    #[serde(default)]
    pub stage_epochs: Vec<usize>,
    /// Per-stage peak learning rates; missing entries use the schedule's.
    #[serde(default)]
    pub stage_lr: Vec<f64>,
    /// EMA automation instead of fixed epochs.
    #[serde(default)]
    pub auto: Option<EmaConfig>,
}

impl ConversionConfig {
    pub fn stage_config(&self, t: usize) -> AlignConfig {
        let mut c = self.align.clone();
        if let Some(&e) = self.stage_epochs.get(t - 1) {
            c.epochs = e;
        }
        if let Some(&lr) = self.stage_lr.get(t - 1) {
            c.schedule = c.schedule.scaled(lr / c.schedule.peak());
        }
        c
    }
}

/// Which slots changed during a stage, by parameter/buffer hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: usize,
    pub trainable: Vec<usize>,
    pub mutated: Vec<usize>,
    pub adapters_unchanged: bool,
}

#[derive(Clone, Debug)]
pub struct ConversionOutcome {
    pub target: ModuleGraph,
    pub reports: Vec<StageReport>,
    pub audits: Vec<StageAudit>,
    pub guide_hash_before: String,
    pub guide_hash_after: String,
}

/// Places any not-yet-replaced slot of `stage_slots` and applies the stage
/// mask: only `stage_slots` (minus pinned copies) train; stem and head stay
/// frozen.
pub(crate) fn prepare_stage(
    model: &mut ModuleGraph,
    guide: &ModuleGraph,
    mapping: &ReplacementMapping,
    stage_slots: &[usize],
    placed: &mut BTreeSet<usize>,
    pinned: &mut BTreeSet<usize>,
    seed: u64,
) -> Result<()> {
    for &i in stage_slots {
        if placed.contains(&i) {
            continue;
        }
        let entry = mapping
            .entry_for(i)
            .ok_or_else(|| Error::InvalidSpec(format!("mapping does not cover slot {i}")))?;
        let (part, keep_frozen) = mapping.instantiate(entry, guide, seed)?;
        model.replace_slot(i, part, Origin::Target)?;
        placed.insert(i);
        if keep_frozen {
            pinned.insert(i);
        }
    }
    model.stem.frozen = true;
    model.head.frozen = true;
    for s in &mut model.slots {
        s.frozen = !stage_slots.contains(&s.index) || pinned.contains(&s.index);
    }
    Ok(())
}

/// Input of slot `i` for pool rows `idx`: the guide tap below it for the
/// independent schedule, else the current hybrid forward.
pub fn route_inputs(
    kind: ScheduleKind,
    model: &ModuleGraph,
    cache: &TapCache,
    pool: &Input,
    i: usize,
    idx: &[usize],
) -> Result<Tensor> {
    model.slot(i)?;
    if kind == ScheduleKind::Independent {
        return cache.batch(i - 1, idx);
    }
    let mut g = Graph::new();
    let stem = model.stem_forward(&mut g, &pool.select(idx))?;
    if i == 1 {
        return Ok(g.value(stem).clone());
    }
    let mut sink = Vec::new();
    let taps = model.run_slots(&mut g, stem, 1..=i - 1, Mode::Eval, &mut sink)?;
    Ok(g.value(taps[i - 2]).clone())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Diverged { .. })
}

/// Runs one stage; on divergence restores the stage-start model and
/// retries once at half the learning rate.
pub(crate) fn guarded_stage(
    model: &mut ModuleGraph,
    stage: usize,
    mut run: impl FnMut(&mut ModuleGraph, f64) -> Result<StageReport>,
) -> Result<StageReport> {
    let snapshot = model.clone();
    match run(model, 1.0) {
        Ok(r) => Ok(r),
        Err(e) if is_divergence(&e) => {
            log::warn!("stage {stage} diverged ({e}); restarting at half the learning rate");
            *model = snapshot;
            match run(model, 0.5) {
                Ok(mut r) => {
                    r.events.insert(
                        0,
                        Event::Restart {
                            lr_scale: 0.5,
                            cause: e.to_string(),
                        },
                    );
                    Ok(r)
                }
                Err(e2) => Err(Error::Diverged {
                    stage,
                    detail: format!("{e}; retry at half rate: {e2}"),
                }),
            }
        }
        Err(e) => Err(e),
    }
}

/// Staged alignment: for each `I_t`, place new target parts, freeze
/// everything else, and minimize the mean dissimilarity of the trained
/// slots to their guide taps over `pool`.
pub fn run_conversion(
    guide: &ModuleGraph,
    mapping: &ReplacementMapping,
    schedule: &Schedule,
    metric: &MetricSpec,
    cfg: &ConversionConfig,
    pool: &Input,
    seed: u64,
) -> Result<ConversionOutcome> {
    let guide_hash_before = guide.state_hash(|_| true);
    let grouped = schedule.kind == ScheduleKind::GroupProgressive;
    if grouped {
        let ranges: Vec<_> = mapping.entries().iter().map(|e| e.slots.clone()).collect();
        if ranges != schedule.groups {
            return Err(Error::InvalidSpec(format!(
                "mapping ranges {ranges:?} differ from schedule groups {:?}",
                schedule.groups
            )));
        }
    } else if mapping.is_grouped() {
        return Err(Error::Unsupported(format!(
            "{} schedule with a grouped mapping",
            schedule.kind.name()
        )));
    } else if schedule.slots() != guide.k() {
        return Err(Error::InvalidSpec(format!(
            "schedule covers {} slots, guide has {}",
            schedule.slots(),
            guide.k()
        )));
    }

    let cache_slots: Vec<usize> = (0..=guide.k()).collect();
    let cache = TapCache::build(guide, pool, &cache_slots, 256)?;
    let mut placed = BTreeSet::new();
    let mut pinned = BTreeSet::new();
    let mut model = if grouped {
        let m = mapping.target_architecture(guide, seed, false)?;
        placed.extend(1..=m.k());
        m
    } else {
        guide.clone()
    };

    let mut reports = Vec::with_capacity(schedule.len());
    let mut audits = Vec::with_capacity(schedule.len());
    for t in 1..=schedule.len() {
        let set = schedule.stage(t)?.to_vec();
        prepare_stage(&mut model, guide, mapping, &set, &mut placed, &mut pinned, seed)?;
        let plan = StagePlan {
            stage: t,
            pairs: set.iter().map(|&i| (i, schedule.guide_slot(i))).collect(),
            routing: schedule.routing(),
        };
        let before: Vec<String> = (1..=model.k()).map(|i| model.slot_hash(i)).collect();
        let adapters = |m: &ModuleGraph| m.state_hash(|n| n.starts_with("stem.") || n.starts_with("head."));
        let adapters_before = adapters(&model);
        let scfg = cfg.stage_config(t);
        let report = guarded_stage(&mut model, t, |m, scale| {
            let mut c = scfg.clone();
            c.schedule = c.schedule.scaled(scale);
            match &cfg.auto {
                Some(ema) => auto_align_stage(m, &cache, pool, &plan, metric, &c, ema, seed),
                None => align_stage(m, &cache, pool, &plan, metric, &c, seed),
            }
        })?;
        log::info!(
            "stage {t}/{} slots {:?}: final per-layer {:?}",
            schedule.len(),
            set,
            report.final_per_layer
        );
        audits.push(StageAudit {
            stage: t,
            trainable: set.clone(),
            mutated: (1..=model.k())
                .filter(|&i| model.slot_hash(i) != before[i - 1])
                .collect(),
            adapters_unchanged: adapters(&model) == adapters_before,
        });
        reports.push(report);
    }
    if let Some(missing) = (1..=model.k()).find(|i| !placed.contains(i)) {
        log::warn!("slot {missing} was never replaced by the schedule");
    }
    model.set_all_frozen(false);
    Ok(ConversionOutcome {
        target: model,
        reports,
        audits,
        guide_hash_before,
        guide_hash_after: guide.state_hash(|_| true),
    })
}
