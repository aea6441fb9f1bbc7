use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parts::{build_part, Activation, BnMode, Ctx, Interface, Part, PartSpec};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::similarity::ActivationMatrix;
use crate::tensor::{BnBatchStats, Graph, Tensor, Var};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// A batch of model inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Dense(Tensor),
    Tokens { ids: Vec<usize>, batch: usize, seq: usize },
}

impl Input {
    pub fn len(&self) -> usize {
        match self {
            Input::Dense(t) => t.shape()[0],
            Input::Tokens { batch, .. } => *batch,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of the batch, in that order.
    pub fn select(&self, idx: &[usize]) -> Input {
        match self {
            Input::Dense(t) => Input::Dense(t.select_rows(idx)),
            Input::Tokens { ids, seq, .. } => Input::Tokens {
                ids: idx
                    .iter()
                    .flat_map(|&i| ids[i * seq..(i + 1) * seq].iter().copied())
                    .collect(),
                batch: idx.len(),
                seq: *seq,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StemSpec {
    Identity,
    Linear {
        dim: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Token plus learned position embeddings; input shape is `[T]`.
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadSpec {
    /// Global average pool over `[C, H, W]` then a linear classifier.
    PoolLinear { classes: usize },
    /// Flatten then a linear classifier.
    Linear { classes: usize },
    /// Per-position classifier over `[T, D]`; logits are `[N·T, vocab]`.
    TokenLinear { vocab: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub part: PartSpec,
    /// Required when the kind cannot infer it (low-rank pair, mismatched conv).
    #[serde(default)]
    pub output: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape.
    pub input: Vec<usize>,
    pub stem: StemSpec,
    pub slots: Vec<SlotSpec>,
    pub head: HeadSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Guide,
    Target,
}

/// Fixed adapter or output layer around the slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<S> {
    pub spec: S,
    pub params: Vec<(String, Tensor)>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlot {
    /// 1-based position.
    pub index: usize,
    pub part: Part,
    pub origin: Origin,
    pub frozen: bool,
}

/// Forward-pass regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Unfrozen batch norms use batch statistics; frozen ones use running.
    Train,
    /// Every batch norm uses running statistics.
    Eval,
    /// Every batch norm uses batch statistics; nothing is trainable.
    Recalibrate,
}

pub struct ForwardOutput {
    pub stem: Var,
    /// Output of each executed slot, in slot order.
    pub taps: Vec<Var>,
    pub logits: Option<Var>,
    pub bn_updates: Vec<(String, BnBatchStats)>,
}

/// The ordered sequence of replaceable slots between a stem and a head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGraph {
    pub input_shape: Vec<usize>,
    pub stem: Adapter<StemSpec>,
    pub slots: Vec<LayerSlot>,
    pub head: Adapter<HeadSpec>,
}

fn uniform(seed: u64, shape: &[usize], fan_in: usize) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn stem_output(spec: &StemSpec, input: &[usize]) -> Result<Vec<usize>> {
    match spec {
        StemSpec::Identity => Ok(input.to_vec()),
        StemSpec::Linear { dim, .. } if input.len() == 1 => Ok(vec![*dim]),
        StemSpec::Embedding { dim, .. } if input.len() == 1 => Ok(vec![input[0], *dim]),
        _ => Err(Error::ShapeMismatch {
            op: "stem",
            detail: format!("{spec:?} on input {input:?}"),
        }),
    }
}

pub(super) fn build_stem(spec: &StemSpec, input: &[usize], seed: u64) -> Vec<(String, Tensor)> {
    match spec {
        StemSpec::Identity => vec![],
        StemSpec::Linear { dim, activation } => {
            let fan = input[0];
            let gain: f64 = if *activation == Activation::None { 1.0 } else { 2.0 };
            let w = uniform(seed, &[fan, *dim], fan);
            vec![
                ("w".into(), Tensor::from_fn(w.shape(), |i| w.data()[i] * gain.sqrt())),
                ("b".into(), Tensor::zeros(&[*dim])),
            ]
        }
        StemSpec::Embedding { vocab, dim } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            vec![
                ("tok".into(), Tensor::randn(&[*vocab, *dim], 0.5, &mut rng)),
                ("pos".into(), Tensor::randn(&[input[0], *dim], 0.5, &mut rng)),
            ]
        }
    }
}

pub(super) fn build_head(spec: &HeadSpec, input: &[usize], seed: u64) -> Result<Vec<(String, Tensor)>> {
    let (fan, out) = match spec {
        HeadSpec::PoolLinear { classes } if input.len() == 3 => (input[0], *classes),
        HeadSpec::Linear { classes } => (input.iter().product(), *classes),
        HeadSpec::TokenLinear { vocab } if input.len() == 2 => (input[1], *vocab),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "head",
                detail: format!("{spec:?} on {input:?}"),
            })
        }
    };
    Ok(vec![
        ("w".into(), uniform(seed, &[fan, out], fan)),
        ("b".into(), Tensor::zeros(&[out])),
    ])
}

fn pvar(g: &mut Graph, prefix: &str, params: &[(String, Tensor)], name: &str, trainable: bool) -> Var {
    let t = &params.iter().find(|(n, _)| n == name).expect("adapter parameter").1;
    g.param(&format!("{prefix}.{name}"), t, trainable)
}

/// Contiguous 1-based slot ranges of size `g`; the last range takes any
/// remainder.
pub fn group_boundaries(k: usize, g: usize) -> Result<Vec<RangeInclusive<usize>>> {
    if g < 1 {
        return Err(Error::InvalidSpec("group size must be >= 1".into()));
    }
    if k % g != 0 {
        log::warn!("{k} slots are not divisible by group size {g}; the last group takes the remainder");
    }
    let mut out = Vec::new();
    let mut start = 1;
    while start <= k {
        let end = (start + g - 1).min(k);
        out.push(start..=end);
        start = end + 1;
    }
    Ok(out)
}

impl ModuleGraph {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let stem_out = stem_output(&spec.stem, &spec.input)?;
        let stem = Adapter {
            spec: spec.stem.clone(),
            params: build_stem(&spec.stem, &spec.input, derive_seed(seed, "stem")),
            frozen: false,
        };
        let mut shape = stem_out;
        let mut slots = Vec::with_capacity(spec.slots.len());
        for (i, s) in spec.slots.iter().enumerate() {
            let out = match (&s.output, s.part.infer_output(&shape)) {
                (Some(o), _) => o.clone(),
                (None, Some(o)) => o,
                (None, None) => {
                    return Err(Error::InvalidSpec(format!(
                        "slot {} ({}) needs an explicit output shape",
                        i + 1,
                        s.part.kind_name()
                    )))
                }
            };
            let iface = Interface::new(shape.clone(), out.clone());
            let part = build_part(&s.part, &iface, derive_seed(seed, &format!("slot{}", i + 1)))?;
            slots.push(LayerSlot {
                index: i + 1,
                part,
                origin: Origin::Guide,
                frozen: false,
            });
            shape = out;
        }
        let head = Adapter {
            spec: spec.head.clone(),
            params: build_head(&spec.head, &shape, derive_seed(seed, "head"))?,
            frozen: false,
        };
        Ok(Self {
            input_shape: spec.input.clone(),
            stem,
            slots,
            head,
        })
    }

    /// The architecture as a buildable spec.
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input: self.input_shape.clone(),
            stem: self.stem.spec.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| SlotSpec {
                    part: s.part.spec.clone(),
                    output: Some(s.part.interface.output.clone()),
                })
                .collect(),
            head: self.head.spec.clone(),
        }
    }

    /// Slot count `k`.
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, i: usize) -> Result<&LayerSlot> {
        if i == 0 {
            return Err(Error::UnknownSlot(i));
        }
        self.slots.get(i - 1).ok_or(Error::UnknownSlot(i))
    }

    pub fn slot_mut(&mut self, i: usize) -> Result<&mut LayerSlot> {
        if i == 0 {
            return Err(Error::UnknownSlot(i));
        }
        self.slots.get_mut(i - 1).ok_or(Error::UnknownSlot(i))
    }

    /// Puts `part` into slot `i`; the interfaces must match exactly.
    pub fn replace_slot(&mut self, i: usize, part: Part, origin: Origin) -> Result<()> {
        let slot = self.slot_mut(i)?;
        if slot.part.interface != part.interface {
            return Err(Error::ShapeMismatch {
                op: "replace_slot",
                detail: format!("slot {i} has {:?}, part has {:?}", slot.part.interface, part.interface),
            });
        }
        slot.part = part;
        slot.origin = origin;
        Ok(())
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.stem.frozen = frozen;
        self.head.frozen = frozen;
        for s in &mut self.slots {
            s.frozen = frozen;
        }
    }

    pub fn slot_prefix(i: usize) -> String {
        format!("slot{i}")
    }

    /// Stem output for a batch.
    pub fn stem_forward(&self, g: &mut Graph, input: &Input) -> Result<Var> {
        let trainable = !self.stem.frozen;
        let p = &self.stem.params;
        match (&self.stem.spec, input) {
            (StemSpec::Identity, Input::Dense(t)) => Ok(g.constant(t.clone())),
            (StemSpec::Linear { activation, .. }, Input::Dense(t)) => {
                let x = g.constant(t.clone().flatten_rows());
                let w = pvar(g, "stem", p, "w", trainable);
                let b = pvar(g, "stem", p, "b", trainable);
                let y = g.matmul(x, w)?;
                let y = g.add_bias(y, b)?;
                activation.apply(g, y)
            }
            (StemSpec::Embedding { .. }, Input::Tokens { ids, batch, seq }) => {
                let tok = pvar(g, "stem", p, "tok", trainable);
                let pos = pvar(g, "stem", p, "pos", trainable);
                let e = g.embedding(tok, ids, &[*batch, *seq])?;
                let pos_ids: Vec<usize> = (0..*batch).flat_map(|_| 0..*seq).collect();
                let pe = g.embedding(pos, &pos_ids, &[*batch, *seq])?;
                g.add(e, pe)
            }
            _ => Err(Error::ShapeMismatch {
                op: "stem",
                detail: "input kind does not match the stem".into(),
            }),
        }
    }

    fn bn_mode(mode: Mode, frozen: bool) -> BnMode {
        match mode {
            Mode::Train if !frozen => BnMode::Batch,
            Mode::Recalibrate => BnMode::Batch,
            _ => BnMode::Running,
        }
    }

    /// Runs slots `range` (1-based, inclusive) starting from `x`, the input
    /// of the first slot in the range.
    pub fn run_slots(
        &self,
        g: &mut Graph,
        x: Var,
        range: RangeInclusive<usize>,
        mode: Mode,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<Vec<Var>> {
        let mut h = x;
        let mut taps = Vec::new();
        for i in range {
            let slot = self.slot(i)?;
            let mut ctx = Ctx {
                g,
                prefix: Self::slot_prefix(i),
                trainable: !slot.frozen && mode != Mode::Recalibrate,
                bn_mode: Self::bn_mode(mode, slot.frozen),
                bn_updates,
            };
            h = slot.part.forward(&mut ctx, h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn head_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let trainable = !self.head.frozen;
        let p = &self.head.params;
        let n = g.shape(x)[0];
        let w = pvar(g, "head", p, "w", trainable);
        let b = pvar(g, "head", p, "b", trainable);
        let feats = match &self.head.spec {
            HeadSpec::PoolLinear { .. } => {
                let s = g.shape(x).to_vec();
                let r = g.reshape(x, &[n, s[1], s[2] * s[3]])?;
                g.mean_axis(r, 2)?
            }
            HeadSpec::Linear { .. } => {
                let d = g.value(x).len() / n;
                g.reshape(x, &[n, d])?
            }
            HeadSpec::TokenLinear { .. } => {
                let s = g.shape(x).to_vec();
                g.reshape(x, &[n * s[1], s[2]])?
            }
        };
        let y = g.matmul(feats, w)?;
        g.add_bias(y, b)
    }

    /// Full forward pass: stem, every slot, head.
    pub fn forward(&self, g: &mut Graph, input: &Input, mode: Mode) -> Result<ForwardOutput> {
        let stem = self.stem_forward(g, input)?;
        let mut bn_updates = Vec::new();
        let taps = if self.k() > 0 {
            self.run_slots(g, stem, 1..=self.k(), mode, &mut bn_updates)?
        } else {
            vec![]
        };
        let last = taps.last().copied().unwrap_or(stem);
        let logits = self.head_forward(g, last)?;
        Ok(ForwardOutput {
            stem,
            taps,
            logits: Some(logits),
            bn_updates,
        })
    }

    /// Inference-mode activation matrices at the requested slots.
    pub fn tap_activations(&self, input: &Input, indices: &[usize]) -> Result<BTreeMap<usize, ActivationMatrix>> {
        for &i in indices {
            self.slot(i)?;
        }
        let last = indices.iter().copied().max().unwrap_or(0);
        let mut g = Graph::new();
        let stem = self.stem_forward(&mut g, input)?;
        let mut sink = Vec::new();
        let taps = if last > 0 {
            self.run_slots(&mut g, stem, 1..=last, Mode::Eval, &mut sink)?
        } else {
            vec![]
        };
        indices
            .iter()
            .map(|&i| Ok((i, ActivationMatrix::from_tensor(g.value(taps[i - 1]).clone())?)))
            .collect()
    }

    /// Inference-mode logits.
    pub fn logits(&self, input: &Input) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, Mode::Eval)?;
        Ok(g.value(out.logits.expect("head")).clone())
    }

    /// Every named parameter with its full name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.stem.params {
            out.push((format!("stem.{n}"), t));
        }
        for s in &self.slots {
            for (n, t) in &s.part.params {
                out.push((format!("{}.{n}", Self::slot_prefix(s.index)), t));
            }
        }
        for (n, t) in &self.head.params {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn param_mut(&mut self, full: &str) -> Option<&mut Tensor> {
        let (owner, local) = full.split_once('.')?;
        let params = match owner {
            "stem" => &mut self.stem.params,
            "head" => &mut self.head.params,
            s => {
                let i: usize = s.strip_prefix("slot")?.parse().ok()?;
                &mut self.slot_mut(i).ok()?.part.params
            }
        };
        params.iter_mut().find(|(n, _)| n == local).map(|(_, t)| t)
    }

    /// Every BN running statistic as `(full name, values)`.
    pub fn named_buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for s in &self.slots {
            for b in &s.part.bn {
                let p = format!("{}.{}", Self::slot_prefix(s.index), b.name);
                out.push((format!("{p}.running_mean"), &b.running_mean));
                out.push((format!("{p}.running_var"), &b.running_var));
            }
        }
        out
    }

    fn buffers_mut(&mut self, full_bn: &str) -> Option<&mut super::parts::BnBuffers> {
        let (owner, local) = full_bn.split_once('.')?;
        let i: usize = owner.strip_prefix("slot")?.parse().ok()?;
        self.slot_mut(i).ok()?.part.bn.iter_mut().find(|b| b.name == local)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.slots.iter().any(|s| !s.part.bn.is_empty())
    }

    /// Exponential running-statistics update from one training batch.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnBatchStats)], momentum: f64) {
        for (name, st) in updates {
            if let Some(b) = self.buffers_mut(name) {
                for c in 0..st.mean.len() {
                    b.running_mean[c] = (1.0 - momentum) * b.running_mean[c] + momentum * st.mean[c];
                    b.running_var[c] = (1.0 - momentum) * b.running_var[c] + momentum * st.var_unbiased[c];
                }
            }
        }
    }

    /// Overwrites running statistics of the named batch norm.
    pub fn set_bn_stats(&mut self, full_bn: &str, mean: &[f64], var: &[f64]) -> Result<()> {
        let b = self
            .buffers_mut(full_bn)
            .ok_or_else(|| Error::InvalidSpec(format!("no batch norm named {full_bn}")))?;
        b.running_mean.copy_from_slice(mean);
        b.running_var.copy_from_slice(var);
        Ok(())
    }

    pub fn bn_names(&self) -> Vec<String> {
        self.slots
            .iter()
            .flat_map(|s| {
                s.part
                    .bn
                    .iter()
                    .map(move |b| format!("{}.{}", Self::slot_prefix(s.index), b.name))
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn slot_num_params(&self) -> usize {
        self.slots.iter().map(|s| s.part.num_params()).sum()
    }

    /// SHA-256 over every parameter and buffer whose full name passes `keep`.
    pub fn state_hash(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, vals: &[f64]| {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for (n, t) in self.named_params() {
            if keep(&n) {
                feed(&n, t.data());
            }
        }
        for (n, v) in self.named_buffers() {
            if keep(&n) {
                feed(&n, v);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of one slot's parameters and buffers.
    pub fn slot_hash(&self, i: usize) -> String {
        let prefix = format!("{}.", Self::slot_prefix(i));
        self.state_hash(|n| n.starts_with(&prefix))
    }

    pub fn group_boundaries(&self, g: usize) -> Result<Vec<RangeInclusive<usize>>> {
        group_boundaries(self.k(), g)
    }
}
