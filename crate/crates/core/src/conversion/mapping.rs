use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{build_part, group_boundaries, Interface, LayerSlot, ModuleGraph, Origin, Part, PartSpec};
use crate::seed::derive_seed;

/// What goes into a replaced slot.
#[derive(Clone, Debug, PartialEq)]
pub enum Replacement {
    /// A freshly initialized part.
    Part(PartSpec),
    /// The guide's own part, optionally kept frozen for the whole run.
    CopyOfGuide { frozen: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingEntry {
    /// Guide slots replaced by this entry.
    pub slots: RangeInclusive<usize>,
    pub replacement: Replacement,
    pub interface: Interface,
}

/// Config form: one part kind for the listed slots (default: all), either
/// slot by slot or one part per group of `group_size` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingSpec {
    pub part: PartSpec,
    #[serde(default)]
    pub slots: Option<Vec<usize>>,
    #[serde(default)]
    pub group_size: Option<usize>,
}

/// Guide slot (or slot range) → replacement part, shape-checked against the
/// guide when built.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementMapping {
    entries: Vec<MappingEntry>,
}

fn range_interface(guide: &ModuleGraph, r: &RangeInclusive<usize>) -> Result<Interface> {
    let first = guide.slot(*r.start())?;
    let last = guide.slot(*r.end())?;
    Ok(Interface::new(
        first.part.interface.input.clone(),
        last.part.interface.output.clone(),
    ))
}

impl ReplacementMapping {
    pub fn new(guide: &ModuleGraph, entries: Vec<(RangeInclusive<usize>, Replacement)>) -> Result<Self> {
        let mut out: Vec<MappingEntry> = Vec::with_capacity(entries.len());
        for (r, rep) in entries {
            if r.is_empty() || *r.start() == 0 {
                return Err(Error::InvalidSpec(format!("bad slot range {r:?}")));
            }
            if out
                .iter()
                .any(|e| e.slots.start() <= r.end() && r.start() <= e.slots.end())
            {
                return Err(Error::InvalidSpec(format!("slot range {r:?} overlaps another entry")));
            }
            let interface = range_interface(guide, &r)?;
            match &rep {
                Replacement::Part(spec) => {
                    build_part(spec, &interface, 0)?;
                }
                Replacement::CopyOfGuide { .. } if r.start() != r.end() => {
                    return Err(Error::InvalidSpec("a guide copy replaces exactly one slot".into()));
                }
                Replacement::CopyOfGuide { .. } => {}
            }
            out.push(MappingEntry {
                slots: r,
                replacement: rep,
                interface,
            });
        }
        out.sort_by_key(|e| *e.slots.start());
        Ok(Self { entries: out })
    }

    /// The same part kind in every guide slot.
    pub fn uniform(guide: &ModuleGraph, part: PartSpec) -> Result<Self> {
        Self::new(
            guide,
            (1..=guide.k())
                .map(|i| (i..=i, Replacement::Part(part.clone())))
                .collect(),
        )
    }

    /// Every slot replaced by a copy of the guide's part.
    pub fn identity(guide: &ModuleGraph, frozen: bool) -> Result<Self> {
        Self::new(
            guide,
            (1..=guide.k())
                .map(|i| (i..=i, Replacement::CopyOfGuide { frozen }))
                .collect(),
        )
    }

    /// One part per contiguous group of `g` slots.
    pub fn grouped(guide: &ModuleGraph, g: usize, part: PartSpec) -> Result<Self> {
        let groups = group_boundaries(guide.k(), g)?;
        Self::new(
            guide,
            groups
                .into_iter()
                .map(|r| (r, Replacement::Part(part.clone())))
                .collect(),
        )
    }

    pub fn from_spec(guide: &ModuleGraph, spec: &MappingSpec) -> Result<Self> {
        match (spec.group_size, &spec.slots) {
            (Some(_), Some(_)) => Err(Error::InvalidSpec("mapping takes slots or group_size, not both".into())),
            (Some(g), None) => Self::grouped(guide, g, spec.part.clone()),
            (None, Some(slots)) => Self::new(
                guide,
                slots
                    .iter()
                    .map(|&i| (i..=i, Replacement::Part(spec.part.clone())))
                    .collect(),
            ),
            (None, None) => Self::uniform(guide, spec.part.clone()),
        }
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn is_grouped(&self) -> bool {
        self.entries.iter().any(|e| e.slots.start() != e.slots.end())
    }

    pub fn entry_for(&self, slot: usize) -> Option<&MappingEntry> {
        self.entries.iter().find(|e| e.slots.contains(&slot))
    }

    /// Instantiates an entry; the flag tells whether the slot stays frozen.
    pub fn instantiate(&self, entry: &MappingEntry, guide: &ModuleGraph, seed: u64) -> Result<(Part, bool)> {
        let first = *entry.slots.start();
        match &entry.replacement {
            Replacement::Part(spec) => Ok((
                build_part(
                    spec,
                    &entry.interface,
                    derive_seed(seed, &format!("target-slot{first}")),
                )?,
                false,
            )),
            Replacement::CopyOfGuide { frozen } => Ok((guide.slot(first)?.part.clone(), *frozen)),
        }
    }

    /// The complete target architecture with every mapped slot replaced.
    /// With `fresh_adapters` the stem, head and any unmapped slots are
    /// re-initialized from `seed`; otherwise they are copied from the guide.
    /// Grouped mappings yield a standalone chain with one slot per entry.
    pub fn target_architecture(&self, guide: &ModuleGraph, seed: u64, fresh_adapters: bool) -> Result<ModuleGraph> {
        let base = if fresh_adapters {
            ModuleGraph::build(&guide.spec(), derive_seed(seed, "adapters"))?
        } else {
            guide.clone()
        };
        if !self.is_grouped() {
            let mut m = base;
            for e in &self.entries {
                let (part, _) = self.instantiate(e, guide, seed)?;
                m.replace_slot(*e.slots.start(), part, Origin::Target)?;
            }
            return Ok(m);
        }
        let mut next = 1;
        let mut slots = Vec::with_capacity(self.entries.len());
        for (j, e) in self.entries.iter().enumerate() {
            if *e.slots.start() != next {
                return Err(Error::InvalidSpec(format!(
                    "a standalone target needs contiguous entries; slot {next} is unmapped"
                )));
            }
            next = e.slots.end() + 1;
            let (part, _) = self.instantiate(e, guide, seed)?;
            slots.push(LayerSlot {
                index: j + 1,
                part,
                origin: Origin::Target,
                frozen: false,
            });
        }
        if next != guide.k() + 1 {
            return Err(Error::InvalidSpec(format!("slots {next}..={} are unmapped", guide.k())));
        }
        Ok(ModuleGraph {
            input_shape: base.input_shape,
            stem: base.stem,
            slots,
            head: base.head,
        })
    }
}
