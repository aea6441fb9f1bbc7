use super::ActivationMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Self-HSIC below this is treated as constant activations.
const DEGENERATE_HSIC: f64 = 1e-15;

fn gram(g: &mut Graph, x: Var) -> Result<Var> {
    let xt = g.transpose(x)?;
    g.matmul(x, xt)
}

fn centering(b: usize) -> Tensor {
    let mut h = Tensor::full(&[b, b], -1.0 / b as f64);
    for i in 0..b {
        h.data_mut()[i * b + i] += 1.0;
    }
    h
}

/// `tr(K̃·L̃)` of centered Grams, i.e. the (unnormalized) biased HSIC.
fn hsic_centered(g: &mut Graph, kc: Var, lc: Var) -> Result<Var> {
    let p = g.mul(kc, lc)?;
    g.sum(p)
}

/// Linear CKA of row-normalized `a` and `b`; `None` when either self-HSIC
/// is degenerate.
pub fn linear_cka_var(g: &mut Graph, a: Var, b: Var) -> Result<Option<Var>> {
    let (ra, rb) = (g.shape(a)[0], g.shape(b)[0]);
    if ra != rb || ra < 2 || g.shape(a).len() != 2 || g.shape(b).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    let an = g.row_normalize(a)?;
    let bn = g.row_normalize(b)?;
    let k = gram(g, an)?;
    let l = gram(g, bn)?;
    let h = g.constant(centering(ra));
    let kh = g.matmul(k, h)?;
    let kc = g.matmul(h, kh)?;
    let lh = g.matmul(l, h)?;
    let lc = g.matmul(h, lh)?;
    let kl = hsic_centered(g, kc, lc)?;
    let kk = hsic_centered(g, kc, kc)?;
    let ll = hsic_centered(g, lc, lc)?;
    if g.value(kk).item() < DEGENERATE_HSIC || g.value(ll).item() < DEGENERATE_HSIC {
        return Ok(None);
    }
    let denom = g.mul(kk, ll)?;
    let denom = g.sqrt(denom)?;
    Ok(Some(g.div(kl, denom)?))
}

/// Δ_CKA = 1 − CKA. Degenerate inputs give a constant 1 and a warning.
pub fn cka_dissimilarity_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    match linear_cka_var(g, a, b)? {
        Some(c) => {
            let neg = g.scale(c, -1.0)?;
            g.shift(neg, 1.0)
        }
        None => {
            log::warn!("CKA self-similarity is degenerate (constant activations); using dissimilarity 1");
            Ok(g.constant(Tensor::scalar(1.0)))
        }
    }
}

/// Linear CKA in `[0, 1]` between two activation matrices with equal rows.
pub fn linear_cka(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    match linear_cka_var(&mut g, av, bv)? {
        Some(c) => Ok(g.value(c).item()),
        None => Err(Error::Degenerate("CKA self-HSIC is zero (constant activations)".into())),
    }
}

pub fn cka_dissimilarity(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    let d = cka_dissimilarity_var(&mut g, av, bv)?;
    Ok(g.value(d).item())
}

/// Unbiased U-statistic HSIC of two `m×m` Gram matrices (`m >= 4`).
///
/// `[tr(K̃L̃) + 1ᵀK̃1·1ᵀL̃1/((m−1)(m−2)) − 2/(m−2)·1ᵀK̃L̃1] / (m(m−3))`
/// with `K̃`, `L̃` the zero-diagonal copies.
pub fn unbiased_hsic_var(g: &mut Graph, k: Var, l: Var) -> Result<Var> {
    let m = g.shape(k)[0];
    if g.shape(k) != [m, m] || g.shape(l) != [m, m] {
        return Err(Error::ShapeMismatch {
            op: "unbiased_hsic",
            detail: format!("{:?} vs {:?}", g.shape(k), g.shape(l)),
        });
    }
    if m < 4 {
        return Err(Error::InvalidSpec(format!("unbiased HSIC needs m >= 4, got {m}")));
    }
    let off = g.constant(Tensor::from_fn(&[m, m], |i| if i / m == i % m { 0.0 } else { 1.0 }));
    let kt = g.mul(k, off)?;
    let lt = g.mul(l, off)?;
    let ones = g.constant(Tensor::ones(&[m, 1]));
    let mf = m as f64;

    let lt_t = g.transpose(lt)?;
    let trace_term = hsic_centered(g, kt, lt_t)?;
    let sk = g.sum(kt)?;
    let sl = g.sum(lt)?;
    let sums = g.mul(sk, sl)?;
    let sums = g.scale(sums, 1.0 / ((mf - 1.0) * (mf - 2.0)))?;
    // 1ᵀK̃L̃1 = (K̃ᵀ1)·(L̃1)
    let kt_t = g.transpose(kt)?;
    let kr = g.matmul(kt_t, ones)?;
    let lr = g.matmul(lt, ones)?;
    let cross = g.mul(kr, lr)?;
    let cross = g.sum(cross)?;
    let cross = g.scale(cross, -2.0 / (mf - 2.0))?;
    let acc = g.add(trace_term, sums)?;
    let acc = g.add(acc, cross)?;
    g.scale(acc, 1.0 / (mf * (mf - 3.0)))
}

pub fn unbiased_hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (kv, lv) = (g.constant(k.clone()), g.constant(l.clone()));
    let h = unbiased_hsic_var(&mut g, kv, lv)?;
    Ok(g.value(h).item())
}

/// The three-trace expression with every term equal to `tr(K̃L̃)`, kept for
/// diagnostics only; it is not an unbiased estimator.
pub fn unbiased_hsic_literal(k: &Tensor, l: &Tensor) -> Result<f64> {
    let m = k.shape()[0];
    if k.shape() != [m, m] || l.shape() != [m, m] {
        return Err(Error::ShapeMismatch {
            op: "unbiased_hsic_literal",
            detail: format!("{:?} vs {:?}", k.shape(), l.shape()),
        });
    }
    if m < 4 {
        return Err(Error::InvalidSpec(format!("unbiased HSIC needs m >= 4, got {m}")));
    }
    let mut t = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                t += k.get2(i, j) * l.get2(j, i);
            }
        }
    }
    let mf = m as f64;
    Ok((t + t / ((mf - 1.0) * (mf - 2.0)) - 2.0 / (mf - 2.0) * t) / (mf * (mf - 3.0)))
}

/// Unclamped unbiased CKA; `None` when a self-term is not positive.
pub fn ucka_var(g: &mut Graph, a: Var, b: Var) -> Result<Option<Var>> {
    let (ra, rb) = (g.shape(a)[0], g.shape(b)[0]);
    if ra != rb || g.shape(a).len() != 2 || g.shape(b).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "ucka",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    let an = g.row_normalize(a)?;
    let bn = g.row_normalize(b)?;
    let k = gram(g, an)?;
    let l = gram(g, bn)?;
    let kl = unbiased_hsic_var(g, k, l)?;
    let kk = unbiased_hsic_var(g, k, k)?;
    let ll = unbiased_hsic_var(g, l, l)?;
    if g.value(kk).item() < DEGENERATE_HSIC || g.value(ll).item() < DEGENERATE_HSIC {
        return Ok(None);
    }
    let denom = g.mul(kk, ll)?;
    let denom = g.sqrt(denom)?;
    Ok(Some(g.div(kl, denom)?))
}

/// `1 − clamp(UCKA, 0, 1)`; degenerate self-terms give a constant 1.
pub fn ucka_dissimilarity_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    match ucka_var(g, a, b)? {
        Some(c) => {
            let c = g.clamp(c, 0.0, 1.0)?;
            let neg = g.scale(c, -1.0)?;
            g.shift(neg, 1.0)
        }
        None => {
            log::warn!("UCKA self-terms are not positive; using dissimilarity 1");
            Ok(g.constant(Tensor::scalar(1.0)))
        }
    }
}

/// Unbiased CKA before clamping (may be slightly negative).
pub fn ucka(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    match ucka_var(&mut g, av, bv)? {
        Some(c) => Ok(g.value(c).item()),
        None => Err(Error::Degenerate("UCKA self-terms are not positive".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, seed: u64) -> ActivationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivationMatrix::from_tensor(Tensor::randn(&[rows, cols], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = mat(10, 6, 1);
        assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cka_dissimilarity(&a, &a).unwrap(), 0.0);
        assert!((ucka(&a, &a).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_activations_are_degenerate() {
        let a = ActivationMatrix::from_tensor(Tensor::ones(&[6, 3])).unwrap();
        let b = mat(6, 3, 2);
        assert!(matches!(linear_cka(&a, &b), Err(Error::Degenerate(_))));
        assert_eq!(cka_dissimilarity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn perturbed_copy_is_partially_dissimilar() {
        let a = mat(8, 4, 3);
        let mut t = a.tensor().clone();
        let noise = mat(1, 4, 99);
        t.data_mut()[8..12].copy_from_slice(noise.tensor().data());
        let b = ActivationMatrix::from_tensor(t).unwrap();
        let d = cka_dissimilarity(&a, &b).unwrap();
        assert!(d > 0.0 && d < 1.0, "{d}");
    }

    #[test]
    fn zero_grams_have_zero_unbiased_hsic() {
        let z = Tensor::zeros(&[5, 5]);
        assert_eq!(unbiased_hsic(&z, &z).unwrap(), 0.0);
        assert!(unbiased_hsic(&Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 3])).is_err());
    }
}
