use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One per-epoch metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub phase: String,
    /// Alignment stage, empty outside conversion.
    pub stage: Option<usize>,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy_or_perplexity: Option<f64>,
    pub lr: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "seed",
            "phase",
            "stage",
            "epoch",
            "loss",
            "accuracy_or_perplexity",
            "lr",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
