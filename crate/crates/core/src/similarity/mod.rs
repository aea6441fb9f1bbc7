//! Representational similarity between activation matrices.
//!
//! Every metric works on `[b, d]` matrices with one row per sample and
//! ℓ2-normalizes rows first, so all scores are invariant to per-sample scale.
//! Each metric has a differentiable form built on a [`Graph`] (used as a
//! training loss) and a plain-value form for evaluation; the value form
//! records the same ops on a throwaway graph so both paths share one
//! implementation.

mod cka;
mod gram;
mod mnn;

pub use cka::{
    cka_dissimilarity, cka_dissimilarity_var, linear_cka, linear_cka_var, ucka, ucka_dissimilarity_var, ucka_var,
    unbiased_hsic, unbiased_hsic_literal, unbiased_hsic_var,
};
pub use gram::{gram_histogram, GramBin, GramSummary};
pub use mnn::{
    dmnn_conditionals, dmnn_loss, dmnn_loss_var, knn_sets, mnn_overlap, mnn_overlap_per_anchor,
    soft_overlap_per_anchor, NeighborConditionals, DMNN_SMOOTHING,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A `[b, d]` activation matrix: one flattened row per mini-batch sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix(Tensor);

impl ActivationMatrix {
    /// Flattens everything after the leading (batch) axis.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() == 0 {
            return Err(Error::ShapeMismatch {
                op: "activation_matrix",
                detail: "scalar has no batch axis".into(),
            });
        }
        Ok(Self(t.flatten_rows()))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Copy with every row scaled to unit ℓ2 norm (zero rows stay zero).
    pub fn row_normalized(&self) -> Self {
        let mut g = Graph::new();
        let x = g.constant(self.0.clone());
        let n = g.row_normalize(x).expect("matrix input");
        Self(g.value(n).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Cka,
    Ucka,
    Dmnn,
}

/// Pairwise similarity used inside D-MNN neighborhoods.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborSimilarity {
    /// `−‖φ_i − φ_j‖² / τ`
    #[default]
    NegativeSquaredDistance,
    /// `φ_i·φ_j / τ`
    DotProduct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub similarity: NeighborSimilarity,
}

fn default_k() -> usize {
    5
}

fn default_tau() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn cka() -> Self {
        Self {
            kind: MetricKind::Cka,
            k: default_k(),
            tau: default_tau(),
            similarity: NeighborSimilarity::default(),
        }
    }

    pub fn ucka() -> Self {
        Self {
            kind: MetricKind::Ucka,
            ..Self::cka()
        }
    }

    pub fn dmnn(k: usize, tau: f64, similarity: NeighborSimilarity) -> Self {
        Self {
            kind: MetricKind::Dmnn,
            k,
            tau,
            similarity,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MetricKind::Cka => "cka",
            MetricKind::Ucka => "ucka",
            MetricKind::Dmnn => "dmnn",
        }
    }

    /// Checks the hyperparameters against a batch of `b` rows.
    pub fn validate(&self, b: usize) -> Result<()> {
        match self.kind {
            MetricKind::Cka if b < 2 => Err(Error::InvalidSpec(format!("CKA needs b >= 2, got {b}"))),
            MetricKind::Ucka if b < 4 => Err(Error::InvalidSpec(format!("UCKA needs b >= 4, got {b}"))),
            MetricKind::Dmnn => {
                if !(self.tau > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "D-MNN temperature must be > 0, got {}",
                        self.tau
                    )));
                }
                if self.k < 1 || self.k + 2 > b {
                    return Err(Error::InvalidSpec(format!(
                        "D-MNN needs 1 <= k <= b-2, got k={} b={b}",
                        self.k
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Differentiable dissimilarity Δ(target, guide) for any metric. The guide
/// side is a constant; gradients reach only `target`.
pub fn dissimilarity_var(g: &mut Graph, spec: &MetricSpec, target: Var, guide: &ActivationMatrix) -> Result<Var> {
    let b = guide.rows();
    spec.validate(b)?;
    if g.shape(target)[0] != b {
        return Err(Error::ShapeMismatch {
            op: "dissimilarity",
            detail: format!("target batch {} vs guide batch {b}", g.shape(target)[0]),
        });
    }
    match spec.kind {
        MetricKind::Cka => {
            let gv = g.constant(guide.tensor().clone());
            cka_dissimilarity_var(g, target, gv)
        }
        MetricKind::Ucka => {
            let gv = g.constant(guide.tensor().clone());
            ucka_dissimilarity_var(g, target, gv)
        }
        MetricKind::Dmnn => {
            let p = dmnn_conditionals(guide, spec)?;
            dmnn_loss_var(g, &p, target, spec)
        }
    }
}

/// Plain-value Δ(target, guide).
pub fn dissimilarity(spec: &MetricSpec, target: &ActivationMatrix, guide: &ActivationMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(target.tensor().clone());
    let d = dissimilarity_var(&mut g, spec, t, guide)?;
    Ok(g.value(d).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_enforces_batch_requirements() {
        assert!(MetricSpec::ucka().validate(3).is_err());
        assert!(MetricSpec::ucka().validate(4).is_ok());
        assert!(MetricSpec::dmnn(3, 0.5, NeighborSimilarity::DotProduct)
            .validate(5)
            .is_ok());
        assert!(MetricSpec::dmnn(4, 0.5, NeighborSimilarity::DotProduct)
            .validate(5)
            .is_err());
        assert!(MetricSpec::dmnn(0, 0.5, NeighborSimilarity::DotProduct)
            .validate(5)
            .is_err());
        assert!(MetricSpec::dmnn(2, 0.0, NeighborSimilarity::DotProduct)
            .validate(5)
            .is_err());
    }

    #[test]
    fn activation_matrix_flattens_per_sample() {
        let conv = ActivationMatrix::from_tensor(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
        assert_eq!((conv.rows(), conv.cols()), (4, 18));
        let tokens = ActivationMatrix::from_tensor(Tensor::zeros(&[4, 5, 8])).unwrap();
        assert_eq!((tokens.rows(), tokens.cols()), (4, 40));
    }

    #[test]
    fn zero_rows_survive_normalization() {
        let t = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = ActivationMatrix::from_tensor(t).unwrap().row_normalized();
        assert_eq!(n.tensor().data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
