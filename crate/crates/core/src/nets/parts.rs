use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnBatchStats, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    /// Uniform init bound multiplier: `sqrt(gain² · 3 / fan_in)`.
    fn gain_sq(self) -> f64 {
        match self {
            Activation::Relu | Activation::Gelu => 2.0,
            _ => 1.0,
        }
    }
}

fn gelu_default() -> Activation {
    Activation::Gelu
}

/// What occupies a slot. Shape-preserving kinds add a residual connection
/// where noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartSpec {
    /// Same-padding, stride-1 convolution on `[C, H, W]`.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default)]
        activation: Activation,
    },
    /// Flatten, project to `rank`, project back to the output size, reshape.
    #[serde(rename = "low-rank-linear-pair")]
    LowRankLinear {
        rank: usize,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default)]
        activation: Activation,
    },
    /// Residual two-layer MLP shared across every position of the last axis.
    TokenwiseMlp {
        hidden: usize,
        #[serde(default = "gelu_default")]
        activation: Activation,
    },
    /// Residual single-head causal self-attention on `[T, D]`.
    #[serde(rename = "single-head-attention")]
    Attention,
    /// Residual stack of tanh Elman layers on `[T, D]`.
    ElmanRnn {
        hidden: usize,
        layers: usize,
    },
    /// Normalization over axis 1 of the batch.
    #[serde(rename = "batchnorm")]
    BatchNorm,
    /// `depth` residual blocks `x + W₂·relu(BN(W₁x))` on `[D]`.
    BlockGroup {
        hidden: usize,
        depth: usize,
    },
    Identity,
}

impl PartSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PartSpec::Conv2d { .. } => "conv2d",
            PartSpec::LowRankLinear { .. } => "low-rank-linear-pair",
            PartSpec::TokenwiseMlp { .. } => "tokenwise-mlp",
            PartSpec::Attention => "single-head-attention",
            PartSpec::ElmanRnn { .. } => "elman-rnn",
            PartSpec::BatchNorm => "batchnorm",
            PartSpec::BlockGroup { .. } => "block-group",
            PartSpec::Identity => "identity",
        }
    }

    /// Output shape for a given input, when the kind determines it.
    pub fn infer_output(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            PartSpec::Conv2d { out_channels, .. } if input.len() == 3 => Some(vec![*out_channels, input[1], input[2]]),
            PartSpec::Conv2d { .. } | PartSpec::LowRankLinear { .. } => None,
            _ => Some(input.to_vec()),
        }
    }
}

/// Per-sample input and output shapes of a slot (batch axis excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interface {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl Interface {
    pub fn new(input: Vec<usize>, output: Vec<usize>) -> Self {
        Self { input, output }
    }

    pub fn same(shape: Vec<usize>) -> Self {
        Self {
            input: shape.clone(),
            output: shape,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.output.iter().product()
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBuffers {
    fn new(name: &str, c: usize) -> Self {
        Self {
            name: name.into(),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

/// How batch-norm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Use batch statistics and report them.
    Batch,
    /// Use running statistics; nothing is reported.
    Running,
}

/// Per-call forward context shared by stem, slots and head.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub prefix: String,
    pub trainable: bool,
    pub bn_mode: BnMode,
    pub bn_updates: &'a mut Vec<(String, BnBatchStats)>,
}

impl Ctx<'_> {
    fn full(&self, local: &str) -> String {
        format!("{}.{}", self.prefix, local)
    }
}

/// A built module: spec, interface, named parameters and BN buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub spec: PartSpec,
    pub interface: Interface,
    pub params: Vec<(String, Tensor)>,
    pub bn: Vec<BnBuffers>,
    /// Human-readable initialization scheme.
    pub init: String,
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor)>,
    bn: Vec<BnBuffers>,
}

impl Init {
    /// Variance-scaled uniform weight of shape `shape` with the given fan-in.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, act: Activation) {
        let bound = (act.gain_sq() * 3.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound));
        self.params.push((name.into(), t));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.push((name.into(), Tensor::zeros(shape)));
    }

    fn batch_norm(&mut self, name: &str, c: usize) {
        self.params.push((format!("{name}.gamma"), Tensor::ones(&[c])));
        self.params.push((format!("{name}.beta"), Tensor::zeros(&[c])));
        self.bn.push(BnBuffers::new(name, c));
    }
}

fn incompatible(spec: &PartSpec, iface: &Interface, why: &str) -> Error {
    Error::ShapeMismatch {
        op: "build_part",
        detail: format!(
            "{} cannot map {:?} -> {:?}: {why}",
            spec.kind_name(),
            iface.input,
            iface.output
        ),
    }
}

/// Builds and initializes a part for `interface`, seeded deterministically.
pub fn build_part(spec: &PartSpec, interface: &Interface, seed: u64) -> Result<Part> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn: Vec::new(),
    };
    let same = interface.input == interface.output;
    let last = interface.input.last().copied().unwrap_or(0);
    let scheme;
    match spec {
        PartSpec::Conv2d {
            out_channels,
            kernel,
            batch_norm,
            activation,
        } => {
            if interface.input.len() != 3 || *kernel % 2 == 0 || *kernel == 0 {
                return Err(incompatible(spec, interface, "needs [C,H,W] input and an odd kernel"));
            }
            let (c, h, w) = (interface.input[0], interface.input[1], interface.input[2]);
            if interface.output != [*out_channels, h, w] {
                return Err(incompatible(spec, interface, "same padding keeps spatial size"));
            }
            init.weight(
                "w",
                &[*out_channels, c, *kernel, *kernel],
                c * kernel * kernel,
                *activation,
            );
            init.zeros("b", &[*out_channels]);
            if *batch_norm {
                init.batch_norm("bn", *out_channels);
            }
            scheme = "variance-scaled uniform, zero bias";
        }
        PartSpec::LowRankLinear {
            rank,
            batch_norm,
            activation,
        } => {
            let (din, dout) = (interface.in_dim(), interface.out_dim());
            if *rank < 1 || *rank > din.min(dout) {
                return Err(Error::InvalidSpec(format!(
                    "low-rank rank {rank} outside 1..={}",
                    din.min(dout)
                )));
            }
            init.weight("w1", &[din, *rank], din, Activation::None);
            init.zeros("b1", &[*rank]);
            init.weight("w2", &[*rank, dout], *rank, *activation);
            init.zeros("b2", &[dout]);
            if *batch_norm {
                let c = interface.output.first().copied().unwrap_or(1);
                init.batch_norm("bn", c);
            }
            scheme = "variance-scaled uniform per factor, zero bias";
        }
        PartSpec::TokenwiseMlp { hidden, activation } => {
            if !same || interface.input.is_empty() {
                return Err(incompatible(spec, interface, "shape-preserving"));
            }
            init.weight("w1", &[last, *hidden], last, *activation);
            init.zeros("b1", &[*hidden]);
            init.weight("w2", &[*hidden, last], *hidden, Activation::None);
            init.zeros("b2", &[last]);
            scheme = "variance-scaled uniform, zero bias";
        }
        PartSpec::Attention => {
            if !same || interface.input.len() != 2 {
                return Err(incompatible(spec, interface, "needs [T,D] -> [T,D]"));
            }
            for n in ["wq", "wk", "wv", "wo"] {
                init.weight(n, &[last, last], last, Activation::None);
            }
            scheme = "variance-scaled uniform projections";
        }
        PartSpec::ElmanRnn { hidden, layers } => {
            if !same || interface.input.len() != 2 || *layers == 0 {
                return Err(incompatible(spec, interface, "needs [T,D] -> [T,D] and >= 1 layer"));
            }
            let mut din = last;
            for l in 0..*layers {
                init.weight(&format!("l{l}.wih"), &[din, *hidden], din, Activation::Tanh);
                init.weight(&format!("l{l}.whh"), &[*hidden, *hidden], *hidden, Activation::Tanh);
                init.zeros(&format!("l{l}.b"), &[*hidden]);
                din = *hidden;
            }
            if *hidden != last {
                init.weight("proj", &[*hidden, last], *hidden, Activation::None);
            }
            scheme = "variance-scaled uniform, zero bias, zero initial state";
        }
        PartSpec::BatchNorm => {
            if !same || interface.input.is_empty() {
                return Err(incompatible(spec, interface, "shape-preserving"));
            }
            init.batch_norm("bn", interface.input[0]);
            scheme = "unit scale, zero shift";
        }
        PartSpec::BlockGroup { hidden, depth } => {
            if !same || interface.input.len() != 1 || *depth == 0 {
                return Err(incompatible(spec, interface, "needs [D] -> [D] and depth >= 1"));
            }
            for j in 0..*depth {
                init.weight(&format!("b{j}.w1"), &[last, *hidden], last, Activation::Relu);
                init.zeros(&format!("b{j}.b1"), &[*hidden]);
                init.batch_norm(&format!("b{j}.bn"), *hidden);
                init.weight(&format!("b{j}.w2"), &[*hidden, last], *hidden, Activation::None);
                init.zeros(&format!("b{j}.b2"), &[last]);
            }
            scheme = "variance-scaled uniform, zero bias";
        }
        PartSpec::Identity => {
            if !same {
                return Err(incompatible(spec, interface, "identity"));
            }
            scheme = "none";
        }
    }
    Ok(Part {
        spec: spec.clone(),
        interface: interface.clone(),
        params: init.params,
        bn: init.bn,
        init: format!("{scheme} (seed {seed})"),
    })
}

impl Part {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn var(&self, ctx: &mut Ctx, name: &str) -> Var {
        let t = self
            .param(name)
            .unwrap_or_else(|| panic!("part is missing parameter {name}"));
        let full = ctx.full(name);
        ctx.g.param(&full, t, ctx.trainable)
    }

    fn bn_apply(&self, ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(ctx, &format!("{name}.gamma"));
        let beta = self.var(ctx, &format!("{name}.beta"));
        let buf = self.bn.iter().find(|b| b.name == name).expect("registered batch norm");
        match ctx.bn_mode {
            BnMode::Running => {
                let (y, _) = ctx
                    .g
                    .batch_norm(x, gamma, beta, Some((&buf.running_mean, &buf.running_var)), BN_EPS)?;
                Ok(y)
            }
            BnMode::Batch => {
                let (y, stats) = ctx.g.batch_norm(x, gamma, beta, None, BN_EPS)?;
                let full = ctx.full(name);
                ctx.bn_updates.push((full, stats.expect("training-mode stats")));
                Ok(y)
            }
        }
    }

    fn linear(&self, ctx: &mut Ctx, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = self.var(ctx, w);
        let y = ctx.g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.var(ctx, b);
                ctx.g.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Maps a `[N, input...]` batch to `[N, output...]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.g.shape(x)[0];
        let expect: Vec<usize> = std::iter::once(n).chain(self.interface.input.iter().copied()).collect();
        if ctx.g.shape(x) != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "part_forward",
                detail: format!(
                    "{} expects {:?}, got {:?}",
                    self.spec.kind_name(),
                    expect,
                    ctx.g.shape(x)
                ),
            });
        }
        let out_shape: Vec<usize> = std::iter::once(n)
            .chain(self.interface.output.iter().copied())
            .collect();
        match &self.spec {
            PartSpec::Conv2d {
                kernel,
                batch_norm,
                activation,
                ..
            } => {
                let w = self.var(ctx, "w");
                let b = self.var(ctx, "b");
                let mut y = ctx.g.conv2d(x, w, Some(b), 1, kernel / 2)?;
                if *batch_norm {
                    y = self.bn_apply(ctx, "bn", y)?;
                }
                activation.apply(ctx.g, y)
            }
            PartSpec::LowRankLinear {
                batch_norm, activation, ..
            } => {
                let flat = ctx.g.reshape(x, &[n, self.interface.in_dim()])?;
                let h = self.linear(ctx, flat, "w1", Some("b1"))?;
                let y = self.linear(ctx, h, "w2", Some("b2"))?;
                let mut y = ctx.g.reshape(y, &out_shape)?;
                if *batch_norm {
                    y = self.bn_apply(ctx, "bn", y)?;
                }
                activation.apply(ctx.g, y)
            }
            PartSpec::TokenwiseMlp { activation, .. } => {
                let d = *self.interface.input.last().unwrap();
                let rows = ctx.g.value(x).len() / d;
                let flat = ctx.g.reshape(x, &[rows, d])?;
                let h = self.linear(ctx, flat, "w1", Some("b1"))?;
                let h = activation.apply(ctx.g, h)?;
                let y = self.linear(ctx, h, "w2", Some("b2"))?;
                let y = ctx.g.reshape(y, &out_shape)?;
                ctx.g.add(x, y)
            }
            PartSpec::Attention => self.attention(ctx, x, n),
            PartSpec::ElmanRnn { hidden, layers } => self.elman(ctx, x, n, *hidden, *layers),
            PartSpec::BatchNorm => self.bn_apply(ctx, "bn", x),
            PartSpec::BlockGroup { depth, .. } => {
                let mut h = x;
                for j in 0..*depth {
                    let y = self.linear(ctx, h, &format!("b{j}.w1"), Some(&format!("b{j}.b1")))?;
                    let y = self.bn_apply(ctx, &format!("b{j}.bn"), y)?;
                    let y = ctx.g.relu(y)?;
                    let y = self.linear(ctx, y, &format!("b{j}.w2"), Some(&format!("b{j}.b2")))?;
                    h = ctx.g.add(h, y)?;
                }
                Ok(h)
            }
            PartSpec::Identity => Ok(x),
        }
    }

    fn attention(&self, ctx: &mut Ctx, x: Var, n: usize) -> Result<Var> {
        let (t, d) = (self.interface.input[0], self.interface.input[1]);
        let flat = ctx.g.reshape(x, &[n * t, d])?;
        let proj = |ctx: &mut Ctx, name: &str| -> Result<Var> {
            let y = self.linear(ctx, flat, name, None)?;
            ctx.g.reshape(y, &[n, t, d])
        };
        let q = proj(ctx, "wq")?;
        let k = proj(ctx, "wk")?;
        let v = proj(ctx, "wv")?;
        let kt = ctx.g.transpose_last2(k)?;
        let scores = ctx.g.bmm(q, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let mask: Vec<bool> = (0..n * t * t).map(|i| (i % t) <= (i / t) % t).collect();
        let att = ctx.g.masked_softmax(scores, &mask)?;
        let ctxv = ctx.g.bmm(att, v)?;
        let ctxv = ctx.g.reshape(ctxv, &[n * t, d])?;
        let out = self.linear(ctx, ctxv, "wo", None)?;
        let out = ctx.g.reshape(out, &[n, t, d])?;
        ctx.g.add(x, out)
    }

    fn elman(&self, ctx: &mut Ctx, x: Var, n: usize, hidden: usize, layers: usize) -> Result<Var> {
        let (t, d) = (self.interface.input[0], self.interface.input[1]);
        let mut seq = x;
        for l in 0..layers {
            let wih = self.var(ctx, &format!("l{l}.wih"));
            let whh = self.var(ctx, &format!("l{l}.whh"));
            let b = self.var(ctx, &format!("l{l}.b"));
            let mut h: Option<Var> = None;
            let mut outs = Vec::with_capacity(t);
            for step in 0..t {
                let xt = ctx.g.slice_axis1(seq, step)?;
                let mut pre = ctx.g.matmul(xt, wih)?;
                if let Some(hp) = h {
                    let r = ctx.g.matmul(hp, whh)?;
                    pre = ctx.g.add(pre, r)?;
                }
                let pre = ctx.g.add_bias(pre, b)?;
                let hn = ctx.g.tanh(pre)?;
                outs.push(hn);
                h = Some(hn);
            }
            seq = ctx.g.stack_axis1(&outs)?;
        }
        let y = if hidden != d {
            let flat = ctx.g.reshape(seq, &[n * t, hidden])?;
            let p = self.linear(ctx, flat, "proj", None)?;
            ctx.g.reshape(p, &[n, t, d])?
        } else {
            seq
        };
        ctx.g.add(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_parameter_count() {
        let spec = PartSpec::Conv2d {
            out_channels: 8,
            kernel: 3,
            batch_norm: false,
            activation: Activation::Relu,
        };
        let p = build_part(&spec, &Interface::new(vec![8, 6, 6], vec![8, 6, 6]), 0).unwrap();
        assert_eq!(p.num_params(), 8 * 8 * 3 * 3 + 8);
    }

    #[test]
    fn low_rank_rejects_bad_rank() {
        let iface = Interface::same(vec![4]);
        let spec = |rank| PartSpec::LowRankLinear {
            rank,
            batch_norm: false,
            activation: Activation::None,
        };
        assert!(build_part(&spec(0), &iface, 0).is_err());
        assert!(build_part(&spec(5), &iface, 0).is_err());
        assert!(build_part(&spec(4), &iface, 0).is_ok());
    }

    #[test]
    fn shape_preserving_parts_reject_reshaping_interfaces() {
        let iface = Interface::new(vec![4, 8], vec![4, 6]);
        assert!(build_part(&PartSpec::Attention, &iface, 0).is_err());
        assert!(build_part(&PartSpec::Identity, &iface, 0).is_err());
    }

    #[test]
    fn spec_serde_uses_kind_tags() {
        let s = serde_json::to_string(&PartSpec::LowRankLinear {
            rank: 4,
            batch_norm: true,
            activation: Activation::Relu,
        })
        .unwrap();
        assert!(s.contains("\"kind\":\"low-rank-linear-pair\""), "{s}");
        let back: PartSpec = serde_json::from_str(r#"{"kind":"elman-rnn","hidden":64,"layers":2}"#).unwrap();
        assert_eq!(back, PartSpec::ElmanRnn { hidden: 64, layers: 2 });
    }

    #[test]
    fn same_seed_same_init() {
        let spec = PartSpec::TokenwiseMlp {
            hidden: 5,
            activation: Activation::Gelu,
        };
        let iface = Interface::same(vec![3, 4]);
        assert_eq!(
            build_part(&spec, &iface, 9).unwrap(),
            build_part(&spec, &iface, 9).unwrap()
        );
        assert_ne!(
            build_part(&spec, &iface, 9).unwrap(),
            build_part(&spec, &iface, 10).unwrap()
        );
    }
}
