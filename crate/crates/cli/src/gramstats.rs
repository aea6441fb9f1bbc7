use std::io::Write;
use std::path::Path;

use theseus_core::data::{gen_dataset, DatasetSpec};
use theseus_core::nets::load_checkpoint;
use theseus_core::similarity::{gram_histogram, GramSummary};

use crate::error::Result;

/// Gram-value histograms of every slot tap of a checkpoint on the first
/// `samples` test inputs of a dataset, with rows ℓ2-normalized as the
/// similarity metrics see them.
pub fn gramstats(checkpoint: &Path, dataset: &Path, samples: usize, bins: usize) -> Result<Vec<(usize, GramSummary)>> {
    let model = load_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(dataset)?;
    let spec: DatasetSpec = if dataset.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    let data = gen_dataset(&spec)?;
    let n = samples.min(data.test.len()).max(2);
    let idx: Vec<usize> = (0..n).collect();
    let batch = data.test.inputs.select(&idx);
    let slots: Vec<usize> = (1..=model.k()).collect();
    let taps = model.tap_activations(&batch, &slots)?;
    taps.into_iter()
        .map(|(i, a)| Ok((i, gram_histogram(&a.row_normalized(), bins)?)))
        .collect()
}

/// One CSV with a `slot` column in front of each histogram row.
pub fn write_gramstats<W: Write>(mut out: W, stats: &[(usize, GramSummary)]) -> Result<()> {
    let mut header = true;
    for (slot, s) in stats {
        let mut buf = Vec::new();
        s.write_csv(&mut buf)?;
        let text = String::from_utf8_lossy(&buf);
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if header {
                    writeln!(out, "slot,{line}")?;
                    header = false;
                }
                continue;
            }
            writeln!(out, "{slot},{line}")?;
        }
    }
    Ok(())
}
