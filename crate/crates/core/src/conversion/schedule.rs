use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{group_boundaries, ModuleGraph};
use crate::training::Routing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Progressive,
    Sequential,
    Independent,
    Joint,
    GroupProgressive,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Progressive => "progressive",
            ScheduleKind::Sequential => "sequential",
            ScheduleKind::Independent => "independent",
            ScheduleKind::Joint => "joint",
            ScheduleKind::GroupProgressive => "group-progressive",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "progressive" => ScheduleKind::Progressive,
            "sequential" => ScheduleKind::Sequential,
            "independent" => ScheduleKind::Independent,
            "joint" => ScheduleKind::Joint,
            "group-progressive" => ScheduleKind::GroupProgressive,
            other => return Err(Error::InvalidSpec(format!("unknown schedule kind {other:?}"))),
        })
    }
}

/// Ordered index sets `I_t` over the trained slots. For group-progressive
/// the indices name target slots, one per guide group in `groups`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub stages: Vec<Vec<usize>>,
    /// Guide slots covered by each trained slot.
    pub groups: Vec<RangeInclusive<usize>>,
    pub reversed: bool,
}

pub fn make_schedule(kind: ScheduleKind, k: usize, group_size: Option<usize>) -> Result<Schedule> {
    if k == 0 {
        return Err(Error::InvalidSpec("a schedule needs at least one slot".into()));
    }
    let groups = match kind {
        ScheduleKind::GroupProgressive => {
            let g = group_size.ok_or_else(|| Error::InvalidSpec("group-progressive needs a group size".into()))?;
            group_boundaries(k, g)?
        }
        _ => (1..=k).map(|i| i..=i).collect(),
    };
    let m = groups.len();
    let stages = match kind {
        ScheduleKind::Progressive | ScheduleKind::GroupProgressive => (1..=m).map(|t| (1..=t).collect()).collect(),
        ScheduleKind::Sequential | ScheduleKind::Independent => (1..=m).map(|t| vec![t]).collect(),
        ScheduleKind::Joint => vec![(1..=m).collect()],
    };
    Ok(Schedule {
        kind,
        stages,
        groups,
        reversed: false,
    })
}

impl Schedule {
    /// Number of stages `T`.
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Number of trained slots.
    pub fn slots(&self) -> usize {
        self.groups.len()
    }

    /// `I_t` for 1-based `t`.
    pub fn stage(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.len() {
            return Err(Error::StageOutOfRange {
                stage: t,
                total: self.len(),
            });
        }
        Ok(&self.stages[t - 1])
    }

    pub fn union(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.stages.iter().flatten().copied().collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    pub fn routing(&self) -> Routing {
        match self.kind {
            ScheduleKind::Independent => Routing::GuideInputs,
            _ => Routing::Hybrid,
        }
    }

    /// The guide slot whose tap a trained slot is compared with.
    pub fn guide_slot(&self, slot: usize) -> usize {
        *self.groups[slot - 1].end()
    }

    /// Same schedule with slot `i` relabeled `m + 1 − i` (last slot first).
    pub fn reversed(&self) -> Result<Schedule> {
        if self.kind == ScheduleKind::GroupProgressive {
            return Err(Error::Unsupported(
                "reverse order needs a functional hybrid; group-progressive trains a standalone chain".into(),
            ));
        }
        let m = self.slots();
        Ok(Schedule {
            kind: self.kind,
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(|&i| m + 1 - i).collect())
                .collect(),
            groups: self.groups.clone(),
            reversed: !self.reversed,
        })
    }
}

/// Per-parameter trainability at stage `t`: exactly the parameters of the
/// slots in `I_t`.
pub fn trainable_parameters(model: &ModuleGraph, schedule: &Schedule, t: usize) -> Result<BTreeMap<String, bool>> {
    let set = schedule.stage(t)?;
    Ok(model
        .named_params()
        .into_iter()
        .map(|(name, _)| {
            let slot = name
                .split_once('.')
                .and_then(|(o, _)| o.strip_prefix("slot"))
                .and_then(|s| s.parse::<usize>().ok());
            let on = slot.is_some_and(|i| set.contains(&i));
            (name, on)
        })
        .collect())
}
