use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, col2im, gemm, im2col, softmax_rows, ConvGeometry, IGNORE_INDEX};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n-1`) variance, the quantity accumulated into running stats.
    pub var_unbiased: Vec<f64>,
    pub count: usize,
}

const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    TransposeLast2(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        probs: Vec<f64>,
        count: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        train: bool,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    PairwiseSqDist(Var),
    Embedding {
        table: Var,
        ids: Rc<[usize]>,
    },
    SliceAxis1 {
        x: Var,
        index: usize,
    },
    StackAxis1(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the trainable parameters reached by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
    /// Trainable parameters not connected to the loss; their gradient is zero.
    pub disconnected: Vec<String>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named parameter leaf. Frozen parameters are recorded as constants
    /// so no gradient buffer is ever allocated for them.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        let v = self.constant(value.clone());
        if trainable {
            self.nodes[v.0].requires_grad = true;
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    /// `x + bias` broadcast over every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            });
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("shift", x, move |v| v + c, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", x, move |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "mean_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        self.push("mean_axis", t, Op::MeanAxis { x, outer, len, inner }, &[x])
    }

    /// Population variance over one axis, composed from primitive ops.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mean = self.mean_axis(x, axis)?;
        // Broadcast the mean back along `axis` through a 0/1 expansion matrix.
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let m = self.value(mean).data().to_vec();
        let mut expanded = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                expanded[(o * len + l) * inner..(o * len + l + 1) * inner]
                    .copy_from_slice(&m[o * inner..(o + 1) * inner]);
            }
        }
        // The mean's own gradient contribution vanishes (sum of deviations is
        // zero), so treating the broadcast mean as a constant is exact.
        let mb = self.constant(Tensor::new(shape, expanded)?);
        let d = self.sub(x, mb)?;
        let sq = self.mul(d, d)?;
        self.mean_axis(sq, axis)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push("bmm", Tensor::new(vec![bs, m, n], out)?, Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "transpose_last2",
                detail: format!("{s:?}"),
            });
        }
        let t = transpose_batched(self.value(x).data(), s[0], s[1], s[2]);
        let t = Tensor::new(vec![s[0], s[2], s[1]], t)?;
        self.push("transpose_last2", t, Op::TransposeLast2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis restricted to `mask`; masked entries are 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask of {} for {:?}", mask.len(), self.shape(x)),
            });
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().unwrap_or(&1);
        let y = softmax_rows(xv.data(), cols, mask)
            .ok_or(Error::Degenerate("softmax row with every entry masked".into()))?;
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    /// Mean softmax cross-entropy of `[n, C]` logits; rows whose target is
    /// [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} rows, {} targets", targets.len()),
            });
        }
        let probs = softmax_rows(self.value(logits).data(), c, None).expect("unmasked softmax");
        let mut loss = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= c {
                return Err(Error::InvalidSpec(format!("target {t} outside {c} classes")));
            }
            loss -= probs[i * c + t].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate("cross-entropy with every target ignored".into()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.into(),
            probs,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss / count as f64), op, &[logits])
    }

    /// 2-D convolution of `[B,C,H,W]` input with `[O,C,K,K]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {sx:?}, kernel {sw:?}"),
            });
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {sw:?} larger than padded input {sx:?}"),
            });
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            padding,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?}", self.shape(b)),
                });
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let (p, plen, o) = (geom.positions(), geom.patch_len(), geom.out_channels);
        let mut pm = vec![0.0; p * o];
        gemm(p, plen, o, &cols, false, self.value(w).data(), true, &mut pm, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in pm.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let hw = ho * wo;
        let mut out = vec![0.0; geom.batch * o * hw];
        for bi in 0..geom.batch {
            for pos in 0..hw {
                for oc in 0..o {
                    out[(bi * o + oc) * hw + pos] = pm[(bi * hw + pos) * o + oc];
                }
            }
        }
        let t = Tensor::new(vec![geom.batch, o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// With `running = None` the batch statistics normalize the input and are
    /// returned; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("input {s:?}, gamma {:?}", self.shape(gamma)),
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let m = n * inner;
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                if m < 2 {
                    return Err(Error::Degenerate("batch norm over fewer than 2 values".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        for v in &xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner] {
                            acc += v;
                        }
                    }
                    mean[ci] = acc / m as f64;
                    let mut acc2 = 0.0;
                    for ni in 0..n {
                        for v in &xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner] {
                            let d = v - mean[ci];
                            acc2 += d * d;
                        }
                    }
                    var[ci] = acc2 / m as f64;
                }
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for j in base..base + inner {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = g[ci] * h + bt[ci];
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels: c,
            inner,
            train: running.is_none(),
        };
        let v = self.push("batch_norm", t, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Scales every row of a `[b, d]` matrix to unit ℓ2 norm. Rows with norm
    /// below 1e-12 are divided by 1e-12 instead, so zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("row_normalize")?;
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = nrm.max(NORM_FLOOR);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / d;
            }
            norms.push(nrm);
        }
        let t = Tensor::new(vec![r, c], out)?;
        self.push("row_normalize", t, Op::RowNormalize { x, norms }, &[x])
    }

    /// `D[i][j] = ‖x_i − x_j‖²` for the rows of a `[b, d]` matrix.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let (b, d) = self.value(x).dims2("pairwise_sq_dist")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = xv[i * d + k] - xv[j * d + k];
                    acc += diff * diff;
                }
                out[i * b + j] = acc;
                out[j * b + i] = acc;
            }
        }
        let t = Tensor::new(vec![b, b], out)?;
        self.push("pairwise_sq_dist", t, Op::PairwiseSqDist(x), &[x])
    }

    /// Looks up rows of a `[V, d]` table; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("embedding")?;
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                detail: format!("{} ids for lead shape {lead:?}", ids.len()),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidSpec(format!("token {id} outside vocabulary {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, out)?;
        self.push("embedding", t, Op::Embedding { table, ids: ids.into() }, &[table])
    }

    /// `[B, T, D] → [B, D]` at position `index` of axis 1.
    pub fn slice_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_axis1",
                detail: format!("index {index} of {s:?}"),
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * t + index) * d..(bi * t + index + 1) * d]);
        }
        let o = Tensor::new(vec![b, d], out)?;
        self.push("slice_axis1", o, Op::SliceAxis1 { x, index }, &[x])
    }

    /// Stacks `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_axis1(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or(Error::InvalidSpec("empty stack".into()))?)
            .to_vec();
        if first.len() != 2 || xs.iter().any(|v| self.shape(*v) != first.as_slice()) {
            return Err(Error::ShapeMismatch {
                op: "stack_axis1",
                detail: format!("items of shape {first:?}"),
            });
        }
        let (b, d, t) = (first[0], first[1], xs.len());
        let mut out = vec![0.0; b * t * d];
        for (ti, v) in xs.iter().enumerate() {
            let xv = self.value(*v).data();
            for bi in 0..b {
                out[(bi * t + ti) * d..(bi * t + ti + 1) * d].copy_from_slice(&xv[bi * d..(bi + 1) * d]);
            }
        }
        let o = Tensor::new(vec![b, t, d], out)?;
        self.push("stack_axis1", o, Op::StackAxis1(xs.to_vec()), xs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for (name, v) in &self.params {
            match grads[v.0].take() {
                Some(g) => {
                    let t = Tensor::new(self.shape(*v).to_vec(), g)?;
                    out.map.insert(name.clone(), t);
                }
                None => {
                    log::warn!("trainable parameter {name} is not connected to the loss");
                    out.disconnected.push(name.clone());
                    out.map.insert(name.clone(), Tensor::zeros(self.shape(*v)));
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                node: loss.0,
            });
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let n = self.nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, gg)| *x -= gg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(v, gg)| *v += c * gg)),
            Op::Shift(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * kernels::gelu_grad(xv[k]);
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] / (2.0 * y[k]);
                }
            }),
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAxis { x, outer, len, inner } => acc(*x, &mut |d| {
                let s = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            d[(o * len + l) * inner + j] += g[o * inner + j] * s;
                        }
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, bv, true, d, 1.0));
                acc(*b, &mut |d| gemm(k, m, n, av, true, g, false, d, 1.0));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = transpose_batched(g, 1, s[0], s[1]);
                acc(*x, &mut |d| add_into(d, &gt));
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let gt = transpose_batched(g, s[0], s[1], s[2]);
                acc(*x, &mut |d| add_into(d, &gt));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for r in 0..d.len() / cols {
                        let range = r * cols..(r + 1) * cols;
                        let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                        for k in range {
                            d[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for r in 0..d.len() / cols {
                        let range = r * cols..(r + 1) * cols;
                        let gs: f64 = g[range.clone()].iter().sum();
                        for k in range {
                            d[k] += g[k] - y[k].exp() * gs;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.nodes[logits.0].value.shape()[1];
                let s = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (o, hw) = (geom.out_channels, geom.out_height() * geom.out_width());
                let (p, plen) = (geom.positions(), geom.patch_len());
                let mut gm = vec![0.0; p * o];
                for bi in 0..geom.batch {
                    for pos in 0..hw {
                        for oc in 0..o {
                            gm[(bi * hw + pos) * o + oc] = g[(bi * o + oc) * hw + pos];
                        }
                    }
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in gm.chunks(o) {
                            add_into(d, row);
                        }
                    });
                }
                acc(*w, &mut |d| gemm(o, p, plen, &gm, true, cols, false, d, 1.0));
                let wv = val(*w);
                acc(*x, &mut |d| {
                    let mut gcols = vec![0.0; p * plen];
                    gemm(p, o, plen, &gm, false, wv, false, &mut gcols, 0.0);
                    add_into(d, &col2im(&gcols, geom));
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            } => {
                let (c, inner) = (*channels, *inner);
                let n = xhat.len() / (c * inner);
                let m = (n * inner) as f64;
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for j in base..base + inner {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*x, &mut |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let k = gv[ci] * inv_std[ci];
                            for j in base..base + inner {
                                d[j] += if *train {
                                    k * (g[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        if nrm > NORM_FLOOR {
                            let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                            for k in range {
                                d[k] += (g[k] - y[k] * dot) / nrm;
                            }
                        } else {
                            for k in range {
                                d[k] += g[k] / NORM_FLOOR;
                            }
                        }
                    }
                });
            }
            Op::PairwiseSqDist(x) => {
                let s = self.nodes[x.0].value.shape();
                let (b, dd) = (s[0], s[1]);
                let xv = val(*x);
                // dX = 2·(diag(rowsum S)·X − S·X) with S = G + Gᵀ.
                let mut sym = vec![0.0; b * b];
                for i2 in 0..b {
                    for j in 0..b {
                        sym[i2 * b + j] = g[i2 * b + j] + g[j * b + i2];
                    }
                }
                let mut sx = vec![0.0; b * dd];
                gemm(b, b, dd, &sym, false, xv, false, &mut sx, 0.0);
                acc(*x, &mut |d| {
                    for i2 in 0..b {
                        let rs: f64 = sym[i2 * b..(i2 + 1) * b].iter().sum();
                        for k in 0..dd {
                            d[i2 * dd + k] += 2.0 * (rs * xv[i2 * dd + k] - sx[i2 * dd + k]);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dd = self.nodes[table.0].value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dd..(id + 1) * dd], &g[r * dd..(r + 1) * dd]);
                    }
                });
            }
            Op::SliceAxis1 { x, index } => {
                let s = self.nodes[x.0].value.shape();
                let (b, t, dd) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        add_into(
                            &mut d[(bi * t + index) * dd..(bi * t + index + 1) * dd],
                            &g[bi * dd..(bi + 1) * dd],
                        );
                    }
                });
            }
            Op::StackAxis1(xs) => {
                let s = node.value.shape();
                let (b, t, dd) = (s[0], s[1], s[2]);
                for (ti, v) in xs.iter().enumerate() {
                    acc(*v, &mut |d| {
                        for bi in 0..b {
                            add_into(
                                &mut d[bi * dd..(bi + 1) * dd],
                                &g[(bi * t + ti) * dd..(bi * t + ti + 1) * dd],
                            );
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_batched(x: &[f64], bs: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        let (src, dst) = (&x[b * m * n..(b + 1) * m * n], &mut out[b * m * n..(b + 1) * m * n]);
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
