use std::io::Write;

use serde::Serialize;

use super::ActivationMatrix;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
    pub is_diagonal: bool,
}

/// Distribution of Gram-matrix entries, split into diagonal and
/// off-diagonal parts. A diagonal far above the off-diagonal mass is the
/// self-similarity inflation that biased CKA is sensitive to.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramSummary {
    pub n: usize,
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    pub min: f64,
    pub max: f64,
    /// `(q, value)` pairs over the off-diagonal entries.
    pub offdiag_quantiles: Vec<(f64, f64)>,
    pub bins: Vec<GramBin>,
}

const QUANTILES: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histogram of `K = A·Aᵀ` with `bins` equal-width bins over the full value
/// range, counted separately for diagonal and off-diagonal entries. The
/// matrix is used as given; normalize rows first to inspect the metric's view.
pub fn gram_histogram(a: &ActivationMatrix, bins: usize) -> Result<GramSummary> {
    let bins = bins.max(1);
    let t = a.tensor();
    let k = t.matmul(&t.transpose2()?)?;
    let n = a.rows();
    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag.push(k.get2(i, j));
            } else {
                off.push(k.get2(i, j));
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let min = k.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = k.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let bin_of = |v: f64| (((v - min) / width) as usize).min(bins - 1);

    let mut counts = vec![[0usize; 2]; bins];
    for &v in &diag {
        counts[bin_of(v)][1] += 1;
    }
    for &v in &off {
        counts[bin_of(v)][0] += 1;
    }
    let mut out = Vec::with_capacity(2 * bins);
    for (flag, is_diagonal) in [(1usize, true), (0, false)] {
        for (b, c) in counts.iter().enumerate() {
            out.push(GramBin {
                bin_left: min + b as f64 * width,
                bin_right: min + (b + 1) as f64 * width,
                count: c[flag],
                is_diagonal,
            });
        }
    }
    let mut sorted = off.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(GramSummary {
        n,
        diag_mean: mean(&diag),
        offdiag_mean: mean(&off),
        min,
        max,
        offdiag_quantiles: QUANTILES.iter().map(|&q| (q, quantile(&sorted, q))).collect(),
        bins: out,
    })
}

impl GramSummary {
    /// CSV with header `bin_left,bin_right,count,is_diagonal`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for b in &self.bins {
            wr.serialize(b).map_err(std::io::Error::other)?;
        }
        wr.flush()?;
        Ok(())
    }
}
