//! Synthetic datasets. Every split is generated from its own seeded stream,
//! so train, validation and test never share draws.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Input;
use crate::seed;
use crate::tensor::{Tensor, IGNORE_INDEX};

/// Fraction of the generated training pool held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Class templates (`template`×`template` binary patches) pasted at
    /// random offsets on a `size`×`size` grid with Gaussian pixel noise.
    TranslatedPatterns {
        classes: usize,
        size: usize,
        #[serde(default = "default_template")]
        template: usize,
    },
    /// Isotropic unit-variance clusters around random class centers.
    GaussianBlobs {
        classes: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Reproduce `length` random tokens after a delimiter; only the copy
    /// positions are scored.
    SequenceCopy { length: usize, alphabet: usize },
    /// Next-token prediction on a seeded first-order Markov chain.
    CharStream { alphabet: usize, seq: usize },
}

fn default_template() -> usize {
    4
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Training pool size before the validation hold-out.
    pub train: usize,
    pub test: usize,
    /// Extra unlabeled inputs for alignment (0 = align on training inputs).
    #[serde(default)]
    pub unlabeled: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// One label per sample; reported metric is accuracy.
    Classification,
    /// One target per position (or IGNORE); reported metric is perplexity.
    Sequence,
}

/// Inputs with their targets; `targets_per_sample` targets per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Input,
    pub targets: Vec<usize>,
    pub targets_per_sample: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> (Input, Vec<usize>) {
        let t = self.targets_per_sample;
        let targets = idx
            .iter()
            .flat_map(|&i| self.targets[i * t..(i + 1) * t].iter().copied())
            .collect();
        (self.inputs.select(idx), targets)
    }

    fn subset(&self, idx: &[usize]) -> Split {
        let (inputs, targets) = self.batch(idx);
        Split {
            inputs,
            targets,
            targets_per_sample: self.targets_per_sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    /// Number of output classes (vocabulary size for sequence tasks).
    pub classes: usize,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub unlabeled: Option<Input>,
}

impl Dataset {
    /// Inputs used for alignment: the unlabeled pool when present, else the
    /// training inputs.
    pub fn alignment_inputs(&self) -> &Input {
        self.unlabeled.as_ref().unwrap_or(&self.train.inputs)
    }
}

fn templates(classes: usize, t: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let cand: Vec<f64> = (0..t * t).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let ones = cand.iter().filter(|v| **v > 0.0).count();
        if ones < t || ones > t * t - t || out.contains(&cand) {
            continue;
        }
        out.push(cand);
    }
    out
}

/// Balanced labels for `n` samples (counts differ by at most one), shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| i % classes).collect();
    l.shuffle(rng);
    l
}

fn patterns(
    n: usize,
    classes: usize,
    size: usize,
    t: usize,
    noise: f64,
    temps: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Split {
    let labels = balanced_labels(n, classes, rng);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut data = vec![0.0; n * size * size];
    for (s, &c) in labels.iter().enumerate() {
        let img = &mut data[s * size * size..(s + 1) * size * size];
        if noise > 0.0 {
            img.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        let (r0, c0) = (rng.gen_range(0..=size - t), rng.gen_range(0..=size - t));
        for r in 0..t {
            for q in 0..t {
                img[(r0 + r) * size + c0 + q] += temps[c][r * t + q];
            }
        }
    }
    Split {
        inputs: Input::Dense(Tensor::new(vec![n, 1, size, size], data).expect("sized")),
        targets: labels,
        targets_per_sample: 1,
    }
}

fn blobs(n: usize, classes: usize, dim: usize, centers: &[Vec<f64>], rng: &mut impl Rng) -> Split {
    let labels = balanced_labels(n, classes, rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * dim);
    for &c in &labels {
        data.extend(centers[c].iter().map(|m| m + normal.sample(rng)));
    }
    Split {
        inputs: Input::Dense(Tensor::new(vec![n, dim], data).expect("sized")),
        targets: labels,
        targets_per_sample: 1,
    }
}

fn copy_task(n: usize, length: usize, alphabet: usize, rng: &mut impl Rng) -> Split {
    let delim = alphabet;
    let seq = 2 * length;
    let mut ids = Vec::with_capacity(n * seq);
    let mut targets = Vec::with_capacity(n * seq);
    for _ in 0..n {
        let x: Vec<usize> = (0..length).map(|_| rng.gen_range(0..alphabet)).collect();
        // full = x, delim, x; inputs drop the last token, targets the first.
        let mut full = x.clone();
        full.push(delim);
        full.extend(&x);
        ids.extend(&full[..seq]);
        for p in 0..seq {
            targets.push(if p >= length { full[p + 1] } else { IGNORE_INDEX });
        }
    }
    Split {
        inputs: Input::Tokens { ids, batch: n, seq },
        targets,
        targets_per_sample: seq,
    }
}

fn markov_matrix(alphabet: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    // Each state prefers a few successors, which leaves room to learn.
    (0..alphabet)
        .map(|_| {
            let mut w: Vec<f64> = (0..alphabet).map(|_| rng.gen::<f64>().powi(4)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            w
        })
        .collect()
}

fn char_stream(n: usize, alphabet: usize, seq: usize, trans: &[Vec<f64>], rng: &mut impl Rng) -> Split {
    let mut ids = Vec::with_capacity(n * seq);
    let mut targets = Vec::with_capacity(n * seq);
    for _ in 0..n {
        let mut s = vec![rng.gen_range(0..alphabet)];
        for _ in 0..seq {
            let u: f64 = rng.gen();
            let row = &trans[*s.last().unwrap()];
            let mut acc = 0.0;
            let mut next = alphabet - 1;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            s.push(next);
        }
        ids.extend(&s[..seq]);
        targets.extend(&s[1..]);
    }
    Split {
        inputs: Input::Tokens { ids, batch: n, seq },
        targets,
        targets_per_sample: seq,
    }
}

/// Generates train/validation/test splits (and the optional unlabeled
/// pool) from the spec's seed.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.train < 10 || spec.test == 0 {
        return Err(Error::InvalidSpec("need at least 10 training and 1 test sample".into()));
    }
    let s = spec.seed;
    let mut structure = seed::rng(s, "structure");
    type Gen = Box<dyn Fn(usize, &mut rand_chacha::ChaCha8Rng) -> Split>;
    let (task, classes, shape, gen): (TaskKind, usize, Vec<usize>, Gen) = match spec.kind.clone() {
        DatasetKind::TranslatedPatterns {
            classes,
            size,
            template,
        } => {
            if classes < 2 || template == 0 || template > size {
                return Err(Error::InvalidSpec(
                    "translated-patterns needs 2+ classes and template <= size".into(),
                ));
            }
            let temps = templates(classes, template, &mut structure);
            let noise = spec.noise;
            (
                TaskKind::Classification,
                classes,
                vec![1, size, size],
                Box::new(move |n, r| patterns(n, classes, size, template, noise, &temps, r)),
            )
        }
        DatasetKind::GaussianBlobs { classes, dim, spread } => {
            if classes < 2 || dim == 0 {
                return Err(Error::InvalidSpec(
                    "gaussian-blobs needs 2+ classes and dim >= 1".into(),
                ));
            }
            let normal = Normal::new(0.0, spread).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| normal.sample(&mut structure)).collect())
                .collect();
            (
                TaskKind::Classification,
                classes,
                vec![dim],
                Box::new(move |n, r| blobs(n, classes, dim, &centers, r)),
            )
        }
        DatasetKind::SequenceCopy { length, alphabet } => {
            if length == 0 || alphabet < 2 {
                return Err(Error::InvalidSpec(
                    "sequence-copy needs length >= 1 and alphabet >= 2".into(),
                ));
            }
            (
                TaskKind::Sequence,
                alphabet + 1,
                vec![2 * length],
                Box::new(move |n, r| copy_task(n, length, alphabet, r)),
            )
        }
        DatasetKind::CharStream { alphabet, seq } => {
            if alphabet < 2 || seq == 0 {
                return Err(Error::InvalidSpec(
                    "char-stream needs alphabet >= 2 and seq >= 1".into(),
                ));
            }
            let trans = markov_matrix(alphabet, &mut structure);
            (
                TaskKind::Sequence,
                alphabet,
                vec![seq],
                Box::new(move |n, r| char_stream(n, alphabet, seq, &trans, r)),
            )
        }
    };
    let pool = gen(spec.train, &mut seed::rng(s, "train"));
    let test = gen(spec.test, &mut seed::rng(s, "test"));
    let unlabeled = (spec.unlabeled > 0).then(|| gen(spec.unlabeled, &mut seed::rng(s, "unlabeled")).inputs);

    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seed::rng(s, "validation-split"));
    let n_val = ((pool.len() as f64) * VAL_FRACTION).round().max(1.0) as usize;
    let (val_idx, train_idx) = idx.split_at(n_val);
    let (mut val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Dataset {
        task,
        classes,
        input_shape: shape,
        train: pool.subset(&train_idx),
        val: pool.subset(&val_idx),
        test,
        unlabeled,
    })
}
