//! Self-check suites run by `theseus metric-check` and `theseus gradcheck`.
//! Each check compares the library against the brute-force oracle crate or
//! central differences and reports one line.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use theseus_core::similarity::{
    dissimilarity_var, dmnn_conditionals, linear_cka, mnn_overlap, soft_overlap_per_anchor, unbiased_hsic,
    ActivationMatrix, MetricSpec, NeighborSimilarity,
};
use theseus_core::tensor::{gradcheck, Graph, Tensor};
use theseus_oracle as oracle;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn within(name: &str, err: f64, tol: f64) -> Self {
        Self::new(name, err <= tol, format!("error {err:.3e} (tolerance {tol:.0e})"))
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

fn act(t: &Tensor) -> ActivationMatrix {
    ActivationMatrix::from_tensor(t.clone()).expect("matrix")
}

fn mat(t: &Tensor) -> oracle::Mat {
    oracle::from_flat(t.shape()[0], t.shape()[1], t.data())
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = randn(n, n, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| a.get2(i, j)).collect();
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Tensor::from_fn(&[n, n], |k| cols[k % n][k / n])
}

fn gram(t: &Tensor) -> Tensor {
    t.matmul(&t.transpose2().expect("2-D")).expect("square")
}

/// Soft neighbour overlap `k·ΣPQ` against the hard kNN overlap at
/// temperature `tau`; returns the absolute difference.
pub fn soft_hard_gap(a: &Tensor, b: &Tensor, k: usize, tau: f64) -> f64 {
    let spec = MetricSpec::dmnn(k, tau, NeighborSimilarity::NegativeSquaredDistance);
    let (pa, pb) = (act(a), act(b));
    let p = dmnn_conditionals(&pa, &spec).expect("conditionals");
    let q = dmnn_conditionals(&pb, &spec).expect("conditionals");
    let soft = soft_overlap_per_anchor(&p, &q, k);
    let soft = soft.iter().sum::<f64>() / soft.len() as f64;
    (soft - mnn_overlap(&pa, &pb, k).expect("overlap")).abs()
}

/// CKA properties, unbiased HSIC against enumeration, and the soft/hard
/// neighbour-overlap identity.
pub fn metric_suite(seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = randn(32, 10, &mut rng);
    let y = randn(32, 12, &mut rng);
    let self_err = (linear_cka(&act(&x), &act(&x)).expect("cka") - 1.0).abs();
    out.push(CheckLine::within("cka self-similarity", self_err, 1e-10));

    let sym = (linear_cka(&act(&x), &act(&y)).unwrap() - linear_cka(&act(&y), &act(&x)).unwrap()).abs();
    out.push(CheckLine::within("cka symmetry", sym, 1e-12));

    let q = orthogonal(10, &mut rng);
    let xq = x.matmul(&q).unwrap();
    let inv = (linear_cka(&act(&xq), &act(&y)).unwrap() - linear_cka(&act(&x), &act(&y)).unwrap()).abs();
    out.push(CheckLine::within("cka orthogonal invariance", inv, 1e-10));

    let oracle_gap = (linear_cka(&act(&x), &act(&y)).unwrap() - oracle::linear_cka(&mat(&x), &mat(&y))).abs();
    out.push(CheckLine::within("cka against explicit centering", oracle_gap, 1e-12));

    let mut worst: f64 = 0.0;
    for b in 4..=8 {
        for _ in 0..20 {
            let k = gram(&randn(b, 3, &mut rng));
            let l = gram(&randn(b, 5, &mut rng));
            let fast = unbiased_hsic(&k, &l).expect("hsic");
            let slow = oracle::hsic_unbiased_enumeration(&mat(&k), &mat(&l));
            worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
        }
    }
    out.push(CheckLine::within(
        "unbiased hsic vs enumeration (b=4..8, 20 trials)",
        worst,
        1e-9,
    ));

    let a = randn(16, 8, &mut rng);
    let b = randn(16, 8, &mut rng);
    out.push(CheckLine::within(
        "soft/hard overlap identity, k=3, tau=1e-3",
        soft_hard_gap(&a, &b, 3, 1e-3),
        1e-3,
    ));
    out.push(CheckLine::within(
        "soft/hard overlap identity, k=1, tau=1e-3",
        soft_hard_gap(&a, &b, 1, 1e-3),
        1e-3,
    ));
    out.push(CheckLine::within(
        "soft/hard overlap identity, k=3, tau=1e6",
        soft_hard_gap(&a, &b, 3, 1e6),
        1e-3,
    ));
    out
}

/// Central-difference checks of each dissimilarity through a one-layer
/// target `tanh(X·W)` producing 16×8 activations.
pub fn gradient_suite(seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(16, 6, &mut rng);
    let w = Tensor::randn(&[6, 8], 0.5, &mut rng);
    // A guide related to the target keeps UCKA inside its clamp range.
    let w0 = Tensor::randn(&[6, 8], 0.5, &mut rng);
    let noise = Tensor::randn(&[16, 8], 0.3, &mut rng);
    let g0 = x.matmul(&w0).unwrap();
    let guide = act(&Tensor::from_fn(&[16, 8], |i| g0.data()[i].tanh() + noise.data()[i]));
    let metrics = [
        ("cka dissimilarity", MetricSpec::cka()),
        ("ucka dissimilarity", MetricSpec::ucka()),
        (
            "d-mnn kl",
            MetricSpec::dmnn(3, 0.5, NeighborSimilarity::NegativeSquaredDistance),
        ),
    ];
    metrics
        .iter()
        .map(|(name, spec)| {
            let res = gradcheck(std::slice::from_ref(&w), 1e-5, |g: &mut Graph, p| {
                let xv = g.constant(x.clone());
                let h = g.matmul(xv, p[0])?;
                let a = g.tanh(h)?;
                dissimilarity_var(g, spec, a, &guide)
            });
            match res {
                Ok(r) => CheckLine::within(&format!("gradcheck {name}"), r.max_rel_error(), 1e-3),
                Err(e) => CheckLine::new(&format!("gradcheck {name}"), false, e.to_string()),
            }
        })
        .collect()
}
