use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use theseus_core::similarity::{
    cka_dissimilarity, dmnn_conditionals, dmnn_loss, gram_histogram, knn_sets, linear_cka, mnn_overlap,
    mnn_overlap_per_anchor, soft_overlap_per_anchor, ucka, unbiased_hsic, unbiased_hsic_literal, ActivationMatrix,
    MetricSpec, NeighborConditionals, NeighborSimilarity, DMNN_SMOOTHING,
};
use theseus_core::tensor::Tensor;
use theseus_oracle as oracle;

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, cols], 1.0, &mut rng)
}

fn am(t: Tensor) -> ActivationMatrix {
    ActivationMatrix::from_tensor(t).unwrap()
}

fn to_mat(t: &Tensor) -> oracle::Mat {
    oracle::from_flat(t.shape()[0], t.shape()[1], t.data())
}

fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    // Gram–Schmidt on a Gaussian matrix.
    let g = rand_tensor(n, n, seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g.get2(i, j)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.iter().map(|a| a / nrm).collect());
    }
    Tensor::from_fn(&[n, n], |k| cols[k % n][k / n])
}

#[test]
fn cka_matches_explicit_centering_oracle() {
    let a = rand_tensor(8, 3, 1);
    let b = rand_tensor(8, 5, 2);
    let got = linear_cka(&am(a.clone()), &am(b.clone())).unwrap();
    let want = oracle::linear_cka(&to_mat(&a), &to_mat(&b));
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn dissimilarity_is_one_minus_oracle_cka() {
    for s in 0..5 {
        let a = rand_tensor(8, 4, 10 + s);
        let b = rand_tensor(8, 6, 20 + s);
        let d = cka_dissimilarity(&am(a.clone()), &am(b.clone())).unwrap();
        let want = 1.0 - oracle::linear_cka(&to_mat(&a), &to_mat(&b));
        assert!((d - want).abs() < 1e-12);
    }
}

#[test]
fn cka_is_invariant_to_orthogonal_maps() {
    let a = rand_tensor(12, 6, 3);
    let q = random_orthogonal(6, 4);
    let aq = a.matmul(&q).unwrap();
    let c = linear_cka(&am(a.clone()), &am(aq)).unwrap();
    assert!((c - 1.0).abs() < 1e-10, "{c}");
}

#[test]
fn unbiased_hsic_matches_enumeration() {
    for b in 4..=8 {
        for trial in 0..20 {
            let x = rand_tensor(b, 3, 100 * b as u64 + trial);
            let y = rand_tensor(b, 4, 7 + 100 * b as u64 + trial);
            let k = x.matmul(&x.transpose2().unwrap()).unwrap();
            let l = y.matmul(&y.transpose2().unwrap()).unwrap();
            let got = unbiased_hsic(&k, &l).unwrap();
            let want = oracle::hsic_unbiased_enumeration(&to_mat(&k), &to_mat(&l));
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel <= 1e-9, "b={b} trial={trial}: {got} vs {want}");
        }
    }
}

#[test]
fn unbiased_hsic_is_centered_on_zero_for_independent_inputs() {
    let mut vals = Vec::new();
    for r in 0..50 {
        let a = am(rand_tensor(64, 8, 1000 + r)).row_normalized();
        let b = am(rand_tensor(64, 8, 5000 + r)).row_normalized();
        let k = a.tensor().matmul(&a.tensor().transpose2().unwrap()).unwrap();
        let l = b.tensor().matmul(&b.tensor().transpose2().unwrap()).unwrap();
        vals.push(unbiased_hsic(&k, &l).unwrap());
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn literal_three_trace_formula_differs_from_estimator() {
    let x = rand_tensor(6, 3, 77);
    let k = x.matmul(&x.transpose2().unwrap()).unwrap();
    let lit = unbiased_hsic_literal(&k, &k).unwrap();
    let est = unbiased_hsic(&k, &k).unwrap();
    assert!((lit - est).abs() > 1e-6);
}

#[test]
fn ucka_self_similarity_and_oracle() {
    let a = rand_tensor(10, 5, 8);
    assert!((ucka(&am(a.clone()), &am(a.clone())).unwrap() - 1.0).abs() < 1e-8);
    let b = rand_tensor(10, 7, 9);
    let got = ucka(&am(a.clone()), &am(b.clone())).unwrap();
    let want = oracle::ucka(&to_mat(&a), &to_mat(&b));
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn ucka_of_random_pairs_stays_in_range() {
    for s in 0..5 {
        let a = rand_tensor(48, 8, 200 + s);
        let b = rand_tensor(48, 8, 300 + s);
        let got = ucka(&am(a), &am(b)).unwrap();
        assert!((-0.1..=1.0).contains(&got), "{got}");
    }
}

#[test]
fn ucka_discounts_inflated_diagonals() {
    // Weak shared structure plus strong per-sample noise in many dimensions:
    // each Gram is close to a scaled identity, which biased CKA rewards.
    let (b, d) = (32, 256);
    let shared = rand_tensor(b, 2, 11);
    let make = |seed| {
        let noise = rand_tensor(b, d, seed);
        Tensor::from_fn(&[b, d], |i| {
            let (r, c) = (i / d, i % d);
            noise.data()[i] + if c < 2 { 0.3 * shared.get2(r, c) } else { 0.0 }
        })
    };
    let (x, y) = (am(make(12)), am(make(13)));
    let biased = linear_cka(&x, &y).unwrap();
    let unbiased = ucka(&x, &y).unwrap();
    let summary = gram_histogram(&x.row_normalized(), 10).unwrap();
    assert!(summary.diag_mean > 10.0 * summary.offdiag_mean.abs());
    assert!(unbiased < biased, "ucka {unbiased} vs cka {biased}");
}

#[test]
fn knn_overlap_matches_set_oracle() {
    let a = rand_tensor(16, 5, 30);
    let mut idx: Vec<usize> = (0..16).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(31));
    let b = a.select_rows(&idx);
    let got = mnn_overlap(&am(a.clone()), &am(b.clone()), 3).unwrap();
    let want = oracle::mnn_overlap(&to_mat(&a), &to_mat(&b), 3);
    assert!((got - want).abs() < 1e-15);
    assert_eq!(knn_sets(&am(a.clone()), 3).unwrap(), oracle::knn_sets(&to_mat(&a), 3));
    assert_eq!(mnn_overlap(&am(a.clone()), &am(a), 3).unwrap(), 1.0);
}

#[test]
fn saturated_k_overlap_matches_oracle_and_bound() {
    // With k = b−2 each set omits one point, so two sets share at least
    // b−3 of their b−2 members.
    let b = 10;
    for s in 0..5 {
        let x = rand_tensor(b, 4, 40 + s);
        let y = rand_tensor(b, 4, 50 + s);
        let got = mnn_overlap(&am(x.clone()), &am(y.clone()), b - 2).unwrap();
        let want = oracle::mnn_overlap(&to_mat(&x), &to_mat(&y), b - 2);
        assert!((got - want).abs() < 1e-15);
        assert!(got >= (b - 3) as f64 / (b - 2) as f64 - 1e-15);
    }
}

#[test]
fn conditionals_match_top_k_oracle() {
    let x = rand_tensor(10, 4, 60);
    for (sim, dot) in [
        (NeighborSimilarity::NegativeSquaredDistance, false),
        (NeighborSimilarity::DotProduct, true),
    ] {
        let spec = MetricSpec::dmnn(3, 0.7, sim);
        let c = dmnn_conditionals(&am(x.clone()), &spec).unwrap();
        let (p, sup) = oracle::conditionals(&to_mat(&x), 3, 0.7, dot);
        assert_eq!(c.support, sup);
        for i in 0..10 {
            for j in 0..10 {
                assert!((c.p.get2(i, j) - p[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn temperature_limits() {
    let x = rand_tensor(10, 4, 61);
    let flat = dmnn_conditionals(&am(x.clone()), &MetricSpec::dmnn(3, 1e6, NeighborSimilarity::default())).unwrap();
    for i in 0..10 {
        for &j in &flat.support[i] {
            assert!((flat.p.get2(i, j) - 1.0 / 3.0).abs() < 1e-5);
        }
    }
    // Well separated: points on distinct angles of a circle.
    let angles = [0.0, 0.4, 1.5, 2.1, 3.4, 3.9, 5.0, 5.4];
    let pts = Tensor::from_fn(&[8, 2], |k| {
        let a: f64 = angles[k / 2];
        if k % 2 == 0 {
            a.cos()
        } else {
            a.sin()
        }
    });
    let hard = dmnn_conditionals(&am(pts), &MetricSpec::dmnn(3, 1e-3, NeighborSimilarity::default())).unwrap();
    for i in 0..8 {
        let max = (0..8).map(|j| hard.p.get2(i, j)).fold(0.0, f64::max);
        assert!(max > 1.0 - 1e-9, "row {i} max {max}");
    }
}

#[test]
fn kl_matches_oracle_and_closed_form() {
    let spec = MetricSpec::dmnn(3, 0.5, NeighborSimilarity::default());
    let p = dmnn_conditionals(&am(rand_tensor(12, 4, 70)), &spec).unwrap();
    let q = dmnn_conditionals(&am(rand_tensor(12, 4, 71)), &spec).unwrap();
    let got = dmnn_loss(&p, &q).unwrap();
    let want = oracle::smoothed_kl(&to_mat(&p.p), &to_mat(&q.p), DMNN_SMOOTHING);
    assert!((got - want).abs() < 1e-10 * want.max(1.0));
    assert!(dmnn_loss(&p, &p).unwrap() < 1e-6);

    // Uniform on {1,2} vs uniform on {3,4} for every anchor of b = 6.
    let (b, k) = (6, 2);
    let uni = |off: usize| {
        let support: Vec<Vec<usize>> = (0..b).map(|i| (0..k).map(|t| (i + off + t) % b).collect()).collect();
        let mut pm = Tensor::zeros(&[b, b]);
        for (i, s) in support.iter().enumerate() {
            for &j in s {
                pm.set2(i, j, 1.0 / k as f64);
            }
        }
        NeighborConditionals { p: pm, support }
    };
    let l = dmnn_loss(&uni(1), &uni(3)).unwrap();
    let closed = oracle::smoothed_kl_disjoint_uniform(b, k, DMNN_SMOOTHING);
    assert!(l.is_finite() && (l - closed).abs() < 1e-9, "{l} vs {closed}");
}

#[test]
fn soft_overlap_tracks_hard_overlap_in_flat_limit() {
    // Large τ flattens each row to uniform on its top-k support, where
    // k·Σ_j P_ij Q_ij counts shared neighbors exactly.
    let (a, b) = (rand_tensor(16, 8, 80), rand_tensor(16, 8, 81));
    let spec = MetricSpec::dmnn(3, 1e6, NeighborSimilarity::default());
    let p = dmnn_conditionals(&am(a.clone()), &spec).unwrap();
    let q = dmnn_conditionals(&am(b.clone()), &spec).unwrap();
    let soft = soft_overlap_per_anchor(&p, &q, 3);
    let hard = mnn_overlap_per_anchor(&am(a), &am(b), 3).unwrap();
    for (s, h) in soft.iter().zip(&hard) {
        assert!((s - h).abs() < 1e-3, "{s} vs {h}");
    }
}

#[test]
fn gram_histogram_on_normalized_rows() {
    let a = am(rand_tensor(32, 16, 90)).row_normalized();
    let s = gram_histogram(&a, 20).unwrap();
    assert!((s.diag_mean - 1.0).abs() < 1e-14);
    let m = oracle::gram(&to_mat(a.tensor()));
    let mut off = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                off += v;
            }
        }
    }
    assert!((s.offdiag_mean - off / (32.0 * 31.0)).abs() < 1e-14);
    let total: usize = s.bins.iter().map(|b| b.count).sum();
    assert_eq!(total, 32 * 32);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_symmetric_and_bounded(a in matrix(6, 3), b in matrix(6, 4)) {
        let (x, y) = (am(a), am(b));
        if let (Ok(ab), Ok(ba)) = (linear_cka(&x, &y), linear_cka(&y, &x)) {
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1e-10..=1.0 + 1e-10).contains(&ab));
        }
    }

    #[test]
    fn cka_ignores_isotropic_scale(a in matrix(6, 3), b in matrix(6, 4), e in -4i32..4) {
        let c = 2f64.powi(e);
        let scaled = Tensor::from_fn(a.shape(), |i| a.data()[i] * c);
        if let Ok(base) = linear_cka(&am(a), &am(b.clone())) {
            prop_assert_eq!(base, linear_cka(&am(scaled), &am(b)).unwrap());
        }
    }

    #[test]
    fn conditionals_are_distributions(x in matrix(8, 3), k in 1usize..=6, tau in 0.05f64..5.0) {
        let c = dmnn_conditionals(&am(x), &MetricSpec::dmnn(k, tau, NeighborSimilarity::default())).unwrap();
        for i in 0..8 {
            let s: f64 = (0..8).map(|j| c.p.get2(i, j)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..8 {
                if !c.support[i].contains(&j) {
                    prop_assert_eq!(c.p.get2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(a in matrix(8, 3), b in matrix(8, 3), k in 1usize..=6) {
        let spec = MetricSpec::dmnn(k, 0.5, NeighborSimilarity::default());
        let p = dmnn_conditionals(&am(a), &spec).unwrap();
        let q = dmnn_conditionals(&am(b), &spec).unwrap();
        prop_assert!(dmnn_loss(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn unbiased_hsic_enumeration_property(seed in 0u64..10_000, b in 4usize..=7) {
        let x = rand_tensor(b, 3, seed);
        let y = rand_tensor(b, 2, seed + 1);
        let k = x.matmul(&x.transpose2().unwrap()).unwrap();
        let l = y.matmul(&y.transpose2().unwrap()).unwrap();
        let got = unbiased_hsic(&k, &l).unwrap();
        let want = oracle::hsic_unbiased_enumeration(&to_mat(&k), &to_mat(&l));
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12));
    }
}
