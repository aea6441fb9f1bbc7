use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;
use theseus_core::data::TaskKind;

use crate::error::{HarnessError, Result};
use crate::run::RunReport;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub rank: usize,
    pub report: String,
    pub method: String,
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub rows: Vec<CompareRow>,
    pub flags: Vec<String>,
}

/// Ranks every method of every report by median test metric (higher
/// accuracy or lower perplexity first); ties keep report/method name order.
pub fn compare(reports: &[RunReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(HarnessError::Mismatch("need at least two reports".into()));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.task != first.task || r.dataset != first.dataset {
            return Err(HarnessError::Mismatch(format!(
                "{} and {} use different tasks or datasets",
                first.name, r.name
            )));
        }
    }
    let mut flags = Vec::new();
    let seed_sets: Vec<BTreeSet<u64>> = reports
        .iter()
        .map(|r| r.seeds.iter().map(|s| s.seed).collect())
        .collect();
    if seed_sets.windows(2).any(|w| w[0] != w[1]) {
        flags.push("seed sets differ between reports; an aggregate over their union is not computed".into());
    }
    let mut rows: Vec<CompareRow> = reports
        .iter()
        .flat_map(|r| {
            r.aggregates.iter().map(|a| CompareRow {
                rank: 0,
                report: r.name.clone(),
                method: a.method.clone(),
                n: a.n,
                median: a.median,
                mean: a.mean,
                stderr: a.stderr,
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.report, &a.method).cmp(&(&b.report, &b.method)));
    let lower_better = first.task == TaskKind::Sequence;
    rows.sort_by(|a, b| {
        let o = a.median.total_cmp(&b.median);
        if lower_better {
            o
        } else {
            o.reverse()
        }
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Comparison {
        metric: first.metric.clone(),
        rows,
        flags,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>4}  {:<24} {:<28} {:>3} {:>10} {:>10} {:>10}\n",
            "rank", "report", "method", "n", "median", "mean", "stderr"
        );
        for r in &self.rows {
            let se = r.stderr.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "{:>4}  {:<24} {:<28} {:>3} {:>10.4} {:>10.4} {:>10}\n",
                r.rank, r.report, r.method, r.n, r.median, r.mean, se
            ));
        }
        for f in &self.flags {
            s.push_str(&format!("note: {f}\n"));
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
