//! Slow, literal reference computations. Nothing here shares code with the
//! library it checks: every quantity is written out with explicit loops over
//! `Vec<Vec<f64>>` rows.

pub type Mat = Vec<Vec<f64>>;

pub fn from_flat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(rows * cols, data.len());
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn normalize_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                r.iter().map(|v| v / 1e-12).collect()
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

pub fn gram(a: &Mat) -> Mat {
    let n = a.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
        }
    }
    k
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            for t in 0..m {
                c[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    c
}

/// `H·K·H` with an explicit centering matrix.
pub fn double_center(k: &Mat) -> Mat {
    let n = k.len();
    let h: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64)
                .collect()
        })
        .collect();
    matmul(&matmul(&h, k), &h)
}

/// `tr(K̃·L̃)` summed term by term.
pub fn hsic_biased(k: &Mat, l: &Mat) -> f64 {
    let (kc, lc) = (double_center(k), double_center(l));
    let n = k.len();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += kc[i][j] * lc[j][i];
        }
    }
    t
}

/// Linear CKA of two activation matrices after row normalization.
pub fn linear_cka(a: &Mat, b: &Mat) -> f64 {
    let (k, l) = (gram(&normalize_rows(a)), gram(&normalize_rows(b)));
    hsic_biased(&k, &l) / (hsic_biased(&k, &k) * hsic_biased(&l, &l)).sqrt()
}

/// Unbiased HSIC by enumerating every ordered 4-tuple of distinct indices:
/// the mean of `k_ij·l_ij + k_ij·l_qr − 2·k_ij·l_iq`.
pub fn hsic_unbiased_enumeration(k: &Mat, l: &Mat) -> f64 {
    let m = k.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        for j in 0..m {
            if j == i {
                continue;
            }
            for q in 0..m {
                if q == i || q == j {
                    continue;
                }
                for r in 0..m {
                    if r == i || r == j || r == q {
                        continue;
                    }
                    total += k[i][j] * l[i][j] + k[i][j] * l[q][r] - 2.0 * k[i][j] * l[i][q];
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

pub fn ucka(a: &Mat, b: &Mat) -> f64 {
    let (k, l) = (gram(&normalize_rows(a)), gram(&normalize_rows(b)));
    hsic_unbiased_enumeration(&k, &l) / (hsic_unbiased_enumeration(&k, &k) * hsic_unbiased_enumeration(&l, &l)).sqrt()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Picks the `k` best-scoring indices other than `anchor` by repeated
/// linear scans; a strictly better score is needed to displace an earlier
/// index, so ties resolve to the lower index. Returned sorted ascending.
pub fn select_top(scores: &[f64], anchor: usize, k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    taken[anchor] = true;
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..scores.len() {
            if taken[j] {
                continue;
            }
            if best.map_or(true, |b| scores[j] > scores[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("enough candidates");
        taken[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    out
}

/// Exact Euclidean kNN sets of the row-normalized points.
pub fn knn_sets(x: &Mat, k: usize) -> Vec<Vec<usize>> {
    let xn = normalize_rows(x);
    (0..xn.len())
        .map(|i| {
            let neg: Vec<f64> = xn.iter().map(|y| -sq_dist(&xn[i], y)).collect();
            select_top(&neg, i, k)
        })
        .collect()
}

pub fn mnn_overlap_per_anchor(a: &Mat, b: &Mat, k: usize) -> Vec<f64> {
    let (sa, sb) = (knn_sets(a, k), knn_sets(b, k));
    sa.iter()
        .zip(&sb)
        .map(|(x, y)| x.iter().filter(|j| y.contains(j)).count() as f64 / k as f64)
        .collect()
}

pub fn mnn_overlap(a: &Mat, b: &Mat, k: usize) -> f64 {
    let v = mnn_overlap_per_anchor(a, b, k);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Neighbor conditionals: scores `−‖x_i−x_j‖²/τ` (or `x_i·x_j/τ` when
/// `dot`) on normalized rows, restricted to the top-k and exponentiated.
pub fn conditionals(x: &Mat, k: usize, tau: f64, dot: bool) -> (Mat, Vec<Vec<usize>>) {
    let xn = normalize_rows(x);
    let b = xn.len();
    let mut p = vec![vec![0.0; b]; b];
    let mut supports = Vec::new();
    for i in 0..b {
        let s: Vec<f64> = (0..b)
            .map(|j| {
                if dot {
                    xn[i].iter().zip(&xn[j]).map(|(u, v)| u * v).sum::<f64>() / tau
                } else {
                    -sq_dist(&xn[i], &xn[j]) / tau
                }
            })
            .collect();
        let sup = select_top(&s, i, k);
        let top = sup.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sup.iter().map(|&j| (s[j] - top).exp()).sum();
        for &j in &sup {
            p[i][j] = (s[j] - top).exp() / z;
        }
        supports.push(sup);
    }
    (p, supports)
}

/// `(1/b) Σ_i Σ_j P_ij log(P_ij / Q̃_ij)` with `Q̃ = (Q+ε)/(1+ε(b−1))` off
/// the diagonal.
pub fn smoothed_kl(p: &Mat, q: &Mat, eps: f64) -> f64 {
    let b = p.len();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j || p[i][j] == 0.0 {
                continue;
            }
            let qs = (q[i][j] + eps) / (1.0 + eps * (b as f64 - 1.0));
            total += p[i][j] * (p[i][j] / qs).ln();
        }
    }
    total / b as f64
}

/// Smoothed KL between uniform distributions on disjoint k-sets.
pub fn smoothed_kl_disjoint_uniform(b: usize, k: usize, eps: f64) -> f64 {
    ((1.0 + eps * (b as f64 - 1.0)) / (k as f64 * eps)).ln()
}

/// Direct convolution with zero padding: `x[C][H][W]`, `w[O][C][kh][kw]`.
pub fn conv2d(
    x: &[Vec<Vec<f64>>],
    w: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<Vec<Vec<f64>>> {
    let (c, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let (o, kh, kw) = (w.len(), w[0][0].len(), w[0][0][0].len());
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w[oc][ic][dy][dx] * x[ic][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[oc][y][xx] = acc;
            }
        }
    }
    out
}

/// Scalar AdamW trajectory: decoupled decay, then the bias-corrected step.
pub fn adamw_scalar(p0: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        p -= lr * wd * p;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let mh = m / (1.0 - beta1.powi(t));
        let vh = v / (1.0 - beta2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

/// EMA after `n` further steps of the stream `L0·rⁿ` started at `L0`
/// with smoothing `alpha`, by the geometric-series closed form.
pub fn ema_geometric(l0: f64, r: f64, alpha: f64, n: u32) -> f64 {
    let q = (1.0 - alpha) / r;
    let decay = (1.0 - alpha).powi(n as i32);
    if (q - 1.0).abs() < 1e-15 {
        return decay * l0 + alpha * l0 * r.powi(n as i32) * n as f64;
    }
    decay * l0 + alpha * l0 * r.powi(n as i32) * (1.0 - q.powi(n as i32)) / (1.0 - q)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `T² · KL(softmax(guide/T) ‖ softmax(student/T))` for one row.
pub fn softened_kl(student: &[f64], guide: &[f64], t: f64) -> f64 {
    let p = softmax(&guide.iter().map(|v| v / t).collect::<Vec<_>>());
    let q = softmax(&student.iter().map(|v| v / t).collect::<Vec<_>>());
    t * t
        * p.iter()
            .zip(&q)
            .map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 })
            .sum::<f64>()
}

/// Best achievable mean cross-entropy of a bigram predictor on
/// `(previous token, target)` pairs: the count-based maximum-likelihood fit
/// evaluated on the same pairs.
pub fn bigram_fit_loss(pairs: &[(usize, usize)], vocab: usize) -> f64 {
    let mut counts = vec![vec![0usize; vocab]; vocab];
    for &(a, b) in pairs {
        counts[a][b] += 1;
    }
    let mut total = 0.0;
    for &(a, b) in pairs {
        let row: usize = counts[a].iter().sum();
        total -= (counts[a][b] as f64 / row as f64).ln();
    }
    total / pairs.len() as f64
}

/// Least-squares `W` minimizing `‖X·W − Y‖²` via normal equations and
/// Gauss–Jordan elimination with partial pivoting; returns `(W, residual)`.
pub fn least_squares(x: &Mat, y: &Mat) -> (Mat, f64) {
    let d = x[0].len();
    let o = y[0].len();
    let mut a = vec![vec![0.0; d + o]; d];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = x.iter().map(|r| r[i] * r[j]).sum();
        }
        for j in 0..o {
            a[i][d + j] = x.iter().zip(y).map(|(r, t)| r[i] * t[j]).sum();
        }
    }
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let pv = a[col][col];
        for v in a[col].iter_mut() {
            *v /= pv;
        }
        for r in 0..d {
            if r != col {
                let f = a[r][col];
                let row = a[col].clone();
                for (v, p) in a[r].iter_mut().zip(&row) {
                    *v -= f * p;
                }
            }
        }
    }
    let w: Mat = (0..d).map(|i| a[i][d..].to_vec()).collect();
    let mut res = 0.0;
    for (r, t) in x.iter().zip(y) {
        for j in 0..o {
            let pred: f64 = (0..d).map(|i| r[i] * w[i][j]).sum();
            res += (pred - t[j]).powi(2);
        }
    }
    (w, res)
}
