use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::nets::{Input, Mode, ModuleGraph, Origin};
use crate::seed;
use crate::tensor::Graph;

/// Freezes every guide-origin slot, so its normalization layers run on
/// running statistics and never record updates. Returns the affected
/// batch-norm names.
pub fn freeze_bn(model: &mut ModuleGraph) -> Vec<String> {
    let mut names = Vec::new();
    for s in model.slots.iter_mut().filter(|s| s.origin == Origin::Guide) {
        s.frozen = true;
        names.extend(
            s.part
                .bn
                .iter()
                .map(|b| format!("{}.{}", ModuleGraph::slot_prefix(s.index), b.name)),
        );
    }
    names
}

/// Resets and re-estimates every running statistic as the average of
/// per-batch means and unbiased variances over `passes` shuffled passes.
/// No weight is touched. Returns the number of batches used.
pub fn recalibrate_bn(
    model: &mut ModuleGraph,
    inputs: &Input,
    batch_size: usize,
    passes: usize,
    seed: u64,
) -> Result<usize> {
    if !model.has_batch_norm() {
        log::warn!("recalibration requested on a model without batch norm; nothing to do");
        return Ok(0);
    }
    let n = inputs.len();
    let bs = batch_size.clamp(2, n.max(2));
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut batches = 0usize;
    for p in 0..passes {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed, &format!("recalibrate-pass{p}")));
        for chunk in idx.chunks(bs).filter(|c| c.len() >= 2) {
            let batch = inputs.select(chunk);
            let mut g = Graph::new();
            let stem = model.stem_forward(&mut g, &batch)?;
            let mut updates = Vec::new();
            model.run_slots(&mut g, stem, 1..=model.k(), Mode::Recalibrate, &mut updates)?;
            for (name, st) in updates {
                let e = acc
                    .entry(name)
                    .or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.mean.len()]));
                e.0.iter_mut().zip(&st.mean).for_each(|(a, v)| *a += v);
                e.1.iter_mut().zip(&st.var_unbiased).for_each(|(a, v)| *a += v);
            }
            batches += 1;
        }
    }
    if batches == 0 {
        log::warn!("recalibration saw no usable batch");
        return Ok(0);
    }
    for (name, (m, v)) in acc {
        let m: Vec<f64> = m.iter().map(|x| x / batches as f64).collect();
        let v: Vec<f64> = v.iter().map(|x| x / batches as f64).collect();
        model.set_bn_stats(&name, &m, &v)?;
    }
    Ok(batches)
}
