use super::{ActivationMatrix, MetricSpec, NeighborSimilarity};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Additive smoothing applied to target conditionals before the KL, so a
/// target that puts no mass on a guide neighbor still gives a finite loss.
pub const DMNN_SMOOTHING: f64 = 1e-8;

/// Row-stochastic neighbor distributions over a batch.
///
/// `p` is stored as a full `b×b` matrix whose diagonal (the anchor) is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborConditionals {
    pub p: Tensor,
    pub support: Vec<Vec<usize>>,
}

impl NeighborConditionals {
    pub fn batch(&self) -> usize {
        self.support.len()
    }

    /// Row `i` without the anchor entry (length `b−1`).
    pub fn row_excluding_anchor(&self, i: usize) -> Vec<f64> {
        let b = self.batch();
        (0..b).filter(|&j| j != i).map(|j| self.p.get2(i, j)).collect()
    }
}

/// Indices of the `k` largest entries per row of a square score matrix,
/// excluding the diagonal. Ties go to the lower index.
fn top_k_rows(scores: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let b = scores.shape()[0];
    (0..b)
        .map(|i| {
            let mut idx: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            idx.sort_by(|&x, &y| scores.get2(i, y).total_cmp(&scores.get2(i, x)).then(x.cmp(&y)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect()
}

fn check_k(b: usize, k: usize) -> Result<()> {
    if k < 1 || k + 2 > b {
        return Err(Error::InvalidSpec(format!("need 1 <= k <= b-2, got k={k} b={b}")));
    }
    Ok(())
}

/// Exact k-nearest-neighbor sets (Euclidean, row-normalized), sorted
/// ascending.
pub fn knn_sets(x: &ActivationMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    check_k(x.rows(), k)?;
    let mut g = Graph::new();
    let v = g.constant(x.tensor().clone());
    let n = g.row_normalize(v)?;
    let d = g.pairwise_sq_dist(n)?;
    let neg = g.scale(d, -1.0)?;
    Ok(top_k_rows(g.value(neg), k))
}

/// Per-anchor `|s_A(i) ∩ s_B(i)| / k`.
pub fn mnn_overlap_per_anchor(a: &ActivationMatrix, b: &ActivationMatrix, k: usize) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "mnn_overlap",
            detail: format!("{} vs {} rows", a.rows(), b.rows()),
        });
    }
    let (sa, sb) = (knn_sets(a, k)?, knn_sets(b, k)?);
    Ok(sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| x.iter().filter(|j| y.binary_search(j).is_ok()).count() as f64 / k as f64)
        .collect())
}

/// Mean kNN-set overlap across anchors.
pub fn mnn_overlap(a: &ActivationMatrix, b: &ActivationMatrix, k: usize) -> Result<f64> {
    let per = mnn_overlap_per_anchor(a, b, k)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Scaled similarity matrix `s_ij` on the row-normalized input.
fn similarity_var(g: &mut Graph, x: Var, spec: &MetricSpec) -> Result<Var> {
    let n = g.row_normalize(x)?;
    match spec.similarity {
        NeighborSimilarity::NegativeSquaredDistance => {
            let d = g.pairwise_sq_dist(n)?;
            g.scale(d, -1.0 / spec.tau)
        }
        NeighborSimilarity::DotProduct => {
            let nt = g.transpose(n)?;
            let s = g.matmul(n, nt)?;
            g.scale(s, 1.0 / spec.tau)
        }
    }
}

/// Masked softmax over each row's top-k support; returns `(Q, support)`.
fn conditionals_var(g: &mut Graph, x: Var, spec: &MetricSpec) -> Result<(Var, Vec<Vec<usize>>)> {
    let b = g.shape(x)[0];
    let s = similarity_var(g, x, spec)?;
    let support = top_k_rows(g.value(s), spec.k);
    let mut mask = vec![false; b * b];
    for (i, row) in support.iter().enumerate() {
        for &j in row {
            mask[i * b + j] = true;
        }
    }
    Ok((g.masked_softmax(s, &mask)?, support))
}

pub fn dmnn_conditionals(x: &ActivationMatrix, spec: &MetricSpec) -> Result<NeighborConditionals> {
    spec.validate(x.rows())?;
    let mut g = Graph::new();
    let v = g.constant(x.tensor().clone());
    let (q, support) = conditionals_var(&mut g, v, spec)?;
    Ok(NeighborConditionals {
        p: g.value(q).clone(),
        support,
    })
}

/// `(1/b) Σ_i KL(P_i ‖ Q̃_i)` where `Q̃ = (Q + ε) / (1 + ε(b−1))` is the
/// smoothed target conditional and `P` is a fixed guide distribution.
pub fn dmnn_loss_var(g: &mut Graph, guide: &NeighborConditionals, target: Var, spec: &MetricSpec) -> Result<Var> {
    let b = guide.batch();
    spec.validate(b)?;
    if g.shape(target)[0] != b || g.shape(target).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dmnn_loss",
            detail: format!("target {:?} vs guide batch {b}", g.shape(target)),
        });
    }
    let (q, _) = conditionals_var(g, target, spec)?;
    smoothed_kl(g, &guide.p, q)
}

fn smoothed_kl(g: &mut Graph, p: &Tensor, q: Var) -> Result<Var> {
    let b = p.shape()[0];
    let eps = DMNN_SMOOTHING;
    let off = Tensor::from_fn(&[b, b], |i| if i / b == i % b { 0.0 } else { 1.0 });
    let offv = g.constant(off);
    // The anchor never receives mass, so smoothing covers the b−1 other entries.
    let qs = g.shift(q, eps)?;
    let qs = g.mul(qs, offv)?;
    let qs = g.scale(qs, 1.0 / (1.0 + eps * (b as f64 - 1.0)))?;
    let diag = g.constant(Tensor::eye(b));
    let qs = g.add(qs, diag)?;
    let log_q = g.log(qs)?;
    let pv = g.constant(p.clone());
    let cross = g.mul(pv, log_q)?;
    let cross = g.sum(cross)?;
    let entropy: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let neg = g.scale(cross, -1.0)?;
    let kl = g.shift(neg, entropy)?;
    g.scale(kl, 1.0 / b as f64)
}

/// Plain-value KL between two conditional sets of the same batch.
pub fn dmnn_loss(p: &NeighborConditionals, q: &NeighborConditionals) -> Result<f64> {
    if p.p.shape() != q.p.shape() {
        return Err(Error::ShapeMismatch {
            op: "dmnn_loss",
            detail: format!("{:?} vs {:?}", p.p.shape(), q.p.shape()),
        });
    }
    let mut g = Graph::new();
    let qv = g.constant(q.p.clone());
    let l = smoothed_kl(&mut g, &p.p, qv)?;
    Ok(g.value(l).item())
}

/// `k · Σ_j P_ij Q_ij` per anchor: the soft analogue of kNN overlap.
pub fn soft_overlap_per_anchor(p: &NeighborConditionals, q: &NeighborConditionals, k: usize) -> Vec<f64> {
    let b = p.batch();
    (0..b)
        .map(|i| k as f64 * (0..b).map(|j| p.p.get2(i, j) * q.p.get2(i, j)).sum::<f64>())
        .collect()
}
