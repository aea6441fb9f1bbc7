//! Acceptance suite: one PASS/FAIL line per criterion, with runtime against
//! its budget. The full experiment criteria take roughly twenty minutes on
//! one core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use theseus_cli::checks::{gradient_suite, metric_suite, CheckLine};
use theseus_cli::run::{median, RunReport};
use theseus_cli::{run, ExperimentConfig};
use theseus_core::conversion::{
    make_schedule, run_conversion, trainable_parameters, ConversionConfig, ReplacementMapping, ScheduleKind,
};
use theseus_core::data::{gen_dataset, DatasetKind, DatasetSpec};
use theseus_core::nets::{
    toy_cnn_spec, Activation, HeadSpec, Input, ModelSpec, ModuleGraph, PartSpec, SlotSpec, StemSpec,
};
use theseus_core::similarity::MetricSpec;
use theseus_core::tensor::Tensor;
use theseus_core::training::{
    recalibrate_bn, AdamWConfig, AlignConfig, EmaConfig, EmaController, Event, LrSchedule, StopReason,
};
use theseus_oracle as oracle;

/// The hard-limit neighbour identity cannot hold for k ≥ 2 at τ = 1e-3:
/// the masked softmax collapses to one-hot on the nearest neighbour, so
/// `k·ΣPQ` only counts top-1 agreement. Tolerated here and nowhere else.
const KNOWN_DEFECT: &str = "soft/hard overlap identity, k=3, tau=1e-3";

struct Criterion {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
    tolerated_failures: Vec<String>,
}

impl Criterion {
    fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{tag} criterion {} ({}): {} [{:.1}s of {}s]",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

/// Writes past the test harness's output capture, so the report shows up
/// in a plain `cargo test` run.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs one criterion; `prior` is time already spent on its behalf in a
/// run shared with other criteria.
fn timed(
    id: usize,
    name: &'static str,
    budget_secs: u64,
    prior: Duration,
    f: impl FnOnce() -> (bool, String, Vec<String>),
) -> Criterion {
    let start = Instant::now();
    let (ok, detail, tolerated_failures) = f();
    let elapsed = start.elapsed() + prior;
    let budget = Duration::from_secs(budget_secs);
    let c = Criterion {
        id,
        name,
        passed: ok && elapsed <= budget,
        detail,
        elapsed,
        budget,
        tolerated_failures,
    };
    emit(&c.line());
    c
}

fn suite_result(lines: Vec<CheckLine>) -> (bool, String, Vec<String>) {
    for l in &lines {
        emit(&format!("    {l}"));
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| l.name.clone()).collect();
    let detail = if failed.is_empty() {
        format!("{} checks passed", lines.len())
    } else {
        format!(
            "{} of {} checks failed: {}",
            failed.len(),
            lines.len(),
            failed.join("; ")
        )
    };
    (failed.is_empty(), detail, failed)
}

fn images() -> theseus_core::data::Dataset {
    gen_dataset(&DatasetSpec {
        kind: DatasetKind::TranslatedPatterns {
            classes: 3,
            size: 6,
            template: 3,
        },
        train: 96,
        test: 16,
        unlabeled: 0,
        noise: 0.2,
        seed: 4,
    })
    .unwrap()
}

fn short_conversion(epochs: usize, lr: f64) -> ConversionConfig {
    ConversionConfig {
        align: AlignConfig {
            epochs,
            batch_size: 16,
            schedule: LrSchedule::Constant { lr },
            optimizer: AdamWConfig::default(),
            eval_samples: 64,
        },
        stage_epochs: vec![],
        stage_lr: vec![],
        auto: None,
    }
}

fn cnn_guide_and_mapping() -> (ModuleGraph, ReplacementMapping) {
    let guide = ModuleGraph::build(&toy_cnn_spec(1, 6, 4, 4, 3), 10).unwrap();
    let mapping = ReplacementMapping::uniform(
        &guide,
        PartSpec::LowRankLinear {
            rank: 8,
            batch_norm: true,
            activation: Activation::Relu,
        },
    )
    .unwrap();
    (guide, mapping)
}

/// Stage sets written out by hand for k = 4.
fn expected_stages(kind: ScheduleKind) -> Vec<Vec<usize>> {
    match kind {
        ScheduleKind::Progressive => vec![vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4]],
        ScheduleKind::Sequential | ScheduleKind::Independent => vec![vec![1], vec![2], vec![3], vec![4]],
        ScheduleKind::Joint => vec![vec![1, 2, 3, 4]],
        ScheduleKind::GroupProgressive => unreachable!(),
    }
}

fn schedule_masks() -> (bool, String, Vec<String>) {
    let data = images();
    let (guide, mapping) = cnn_guide_and_mapping();
    let mut problems = Vec::new();
    for kind in [
        ScheduleKind::Progressive,
        ScheduleKind::Sequential,
        ScheduleKind::Independent,
        ScheduleKind::Joint,
    ] {
        let want = expected_stages(kind);
        let schedule = make_schedule(kind, 4, None).unwrap();
        for (t, set) in want.iter().enumerate() {
            let mask = trainable_parameters(&guide, &schedule, t + 1).unwrap();
            let bad = mask.iter().any(|(name, &on)| {
                let slot: usize = name
                    .strip_prefix("slot")
                    .and_then(|r| r.split('.').next())
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(0);
                on != set.contains(&slot)
            });
            if bad {
                problems.push(format!("{kind:?} stage {} mask", t + 1));
            }
        }
        let out = run_conversion(
            &guide,
            &mapping,
            &schedule,
            &MetricSpec::cka(),
            &short_conversion(1, 1e-3),
            &data.train.inputs,
            1,
        )
        .unwrap();
        let mutated: Vec<Vec<usize>> = out.audits.iter().map(|a| a.mutated.clone()).collect();
        if mutated != want {
            problems.push(format!("{kind:?} mutated {mutated:?}"));
        }
        if !out.audits.iter().all(|a| a.adapters_unchanged) || out.guide_hash_before != out.guide_hash_after {
            problems.push(format!("{kind:?} touched frozen state"));
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        "masks and per-stage mutation audits match for all four schedules".into()
    } else {
        problems.join("; ")
    };
    (ok, detail, vec![])
}

fn representability() -> (bool, String, Vec<String>) {
    let spec = ModelSpec {
        input: vec![8],
        stem: StemSpec::Identity,
        slots: vec![SlotSpec {
            part: PartSpec::LowRankLinear {
                rank: 8,
                batch_norm: false,
                activation: Activation::None,
            },
            output: Some(vec![8]),
        }],
        head: HeadSpec::Linear { classes: 2 },
    };
    let guide = ModuleGraph::build(&spec, 77).unwrap();
    let n = 512;
    let x = Tensor::randn(&[n, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let pool = Input::Dense(x.clone());
    let y = guide.tap_activations(&pool, &[1]).unwrap()[&1].tensor().clone();
    let with_bias = Tensor::from_fn(
        &[n, 9],
        |i| if i % 9 == 8 { 1.0 } else { x.data()[(i / 9) * 8 + i % 9] },
    );
    let (_, resid) = oracle::least_squares(
        &oracle::from_flat(n, 9, with_bias.data()),
        &oracle::from_flat(n, 8, y.data()),
    );
    let mapping = ReplacementMapping::uniform(
        &guide,
        PartSpec::LowRankLinear {
            rank: 8,
            batch_norm: false,
            activation: Activation::None,
        },
    )
    .unwrap();
    let schedule = make_schedule(ScheduleKind::Progressive, 1, None).unwrap();
    let mut c = short_conversion(150, 1e-2);
    c.align.batch_size = 64;
    c.align.eval_samples = 512;
    c.align.optimizer.weight_decay = 0.0;
    let out = run_conversion(&guide, &mapping, &schedule, &MetricSpec::cka(), &c, &pool, 5).unwrap();
    let delta = out.reports[0].final_loss();
    (
        resid < 1e-12 && delta <= 1e-3,
        format!("least-squares residual {resid:.1e}, final CKA dissimilarity {delta:.2e} (needs <= 1e-3)"),
        vec![],
    )
}

fn batch_norm_protocol() -> (bool, String, Vec<String>) {
    let data = images();
    let (guide, mapping) = cnn_guide_and_mapping();
    let schedule = make_schedule(ScheduleKind::Progressive, 4, None).unwrap();
    let out = run_conversion(
        &guide,
        &mapping,
        &schedule,
        &MetricSpec::cka(),
        &short_conversion(2, 1e-3),
        &data.train.inputs,
        9,
    )
    .unwrap();
    // Guide-origin slots of the hybrid keep their statistics at every stage.
    let untouched_guide_slots = out
        .audits
        .iter()
        .all(|a| a.mutated.iter().all(|s| a.trainable.contains(s)));
    let stable = out.guide_hash_before == out.guide_hash_after && untouched_guide_slots;

    let (mu, sigma) = ([2.0, -3.0, 5.0], [0.5, 1.0, 2.0]);
    let n = 200_000;
    let z = Tensor::randn(&[n, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let x = Tensor::from_fn(&[n, 3], |i| mu[i % 3] + sigma[i % 3] * z.data()[i]);
    let probe = ModelSpec {
        input: vec![3],
        stem: StemSpec::Identity,
        slots: vec![SlotSpec {
            part: PartSpec::BatchNorm,
            output: None,
        }],
        head: HeadSpec::Linear { classes: 2 },
    };
    let mut model = ModuleGraph::build(&probe, 3).unwrap();
    let weights = model.state_hash(|n| !n.contains("running"));
    recalibrate_bn(&mut model, &Input::Dense(x), 256, 1, 4).unwrap();
    let same_weights = model.state_hash(|n| !n.contains("running")) == weights;
    let buffers: BTreeMap<String, Vec<f64>> = model.named_buffers().into_iter().map(|(k, v)| (k, v.clone())).collect();
    let mean = buffers.iter().find(|(k, _)| k.ends_with("mean")).unwrap().1;
    let var = buffers.iter().find(|(k, _)| k.ends_with("var")).unwrap().1;
    let worst = (0..3)
        .map(|c| {
            let s2 = sigma[c] * sigma[c];
            ((mean[c] - mu[c]).abs() / mu[c].abs()).max((var[c] - s2).abs() / s2)
        })
        .fold(0.0, f64::max);
    (
        stable && same_weights && worst <= 0.01,
        format!(
            "guide state stable: {stable}; weights untouched: {same_weights}; worst relative moment error {:.3}%",
            worst * 100.0
        ),
        vec![],
    )
}

fn ema_controller() -> (bool, String, Vec<String>) {
    let cfg = EmaConfig::default();
    let r = 0.995;
    let n_stop = (0u32..)
        .find(|&n| oracle::ema_geometric(1.0, r, cfg.alpha(), n) < cfg.threshold)
        .unwrap() as usize;
    let per_epoch = 50;
    let stream: Vec<Vec<f64>> = (0..40)
        .map(|e| (0..per_epoch).map(|s| r.powi((e * per_epoch + s) as i32)).collect())
        .collect();
    let events = EmaController::replay(&cfg, 1e-3, &stream);
    let stop_ok = events
        == vec![Event::Stop {
            epoch: n_stop / per_epoch,
            step: n_stop + 1,
            reason: StopReason::Threshold,
        }];

    // A flat stream never improves: a reduction every `patience` epochs and
    // the cap after `max_epochs`.
    let flat = EmaController::replay(&cfg, 1e-3, &vec![vec![1.0; 10]; 150]);
    let mut want = Vec::new();
    let mut lr = 1e-3;
    for e in (4..100).step_by(4) {
        want.push(Event::LrReduced {
            epoch: e,
            step: 10 * (e + 1),
            from: lr,
            to: lr * 0.1,
        });
        lr *= 0.1;
    }
    want.push(Event::Stop {
        epoch: 99,
        step: 1000,
        reason: StopReason::EpochCap,
    });
    let flat_ok = flat == want;
    (
        stop_ok && flat_ok,
        format!(
            "geometric stream stops at step {} as predicted: {stop_ok}; flat stream reduces at epochs 4,8,..,96 and caps at 100: {flat_ok}",
            n_stop + 1
        ),
        vec![],
    )
}

fn config(file: &str, out: &str) -> ExperimentConfig {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap();
    cfg.output = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(out);
    cfg
}

fn med(report: &RunReport, method: &str) -> f64 {
    median(&report.method_values(method).iter().map(|(_, v)| *v).collect::<Vec<_>>())
}

fn complete(report: &RunReport) -> bool {
    report.seeds.len() == 3 && report.seeds.iter().all(|s| s.error.is_none())
}

#[test]
fn acceptance() {
    let mut results = Vec::new();

    results.push(timed(1, "metric oracle suite", 60, Duration::ZERO, || {
        suite_result(metric_suite(0))
    }));
    results.push(timed(2, "gradient suite", 60, Duration::ZERO, || {
        suite_result(gradient_suite(0))
    }));
    results.push(timed(3, "schedule correctness", 60, Duration::ZERO, schedule_masks));
    results.push(timed(4, "representability", 120, Duration::ZERO, representability));
    results.push(timed(5, "batch-norm protocol", 60, Duration::ZERO, batch_norm_protocol));
    results.push(timed(6, "ema controller", 10, Duration::ZERO, ema_controller));

    let start = Instant::now();
    let schedules = run(&config("cnn-to-mlp.toml", "cnn-to-mlp")).expect("schedule comparison run");
    let shared = start.elapsed();
    results.push(timed(7, "trained guide, progressive vs naive", 15 * 60, shared, || {
        let guides: Vec<f64> = schedules
            .seeds
            .iter()
            .filter_map(|s| s.guide.as_ref())
            .map(|g| g.val_metric)
            .collect();
        let guides_ok = guides.len() == 3 && guides.iter().all(|v| *v >= 0.9);
        let (p, n) = (med(&schedules, "not-progressive"), med(&schedules, "naive"));
        (
            complete(&schedules) && guides_ok && p > n,
            format!("guide val accuracy {guides:.3?}; median test accuracy progressive {p:.4} vs naive {n:.4}"),
            vec![],
        )
    }));
    // The shared run's time counts against both budgets.
    results.push(timed(8, "schedule ordering", 30 * 60, shared, || {
        let p = med(&schedules, "not-progressive");
        let j = med(&schedules, "not-joint");
        let s = med(&schedules, "not-sequential");
        let i = med(&schedules, "not-independent");
        (
            complete(&schedules) && p >= j && p > s,
            format!("median test accuracy progressive {p:.4}, joint {j:.4}, sequential {s:.4}, independent {i:.4}"),
            vec![],
        )
    }));

    results.push(timed(9, "untrained guide", 15 * 60, Duration::ZERO, || {
        let r = run(&config("untrained-guide.toml", "untrained-guide")).expect("untrained-guide run");
        let DatasetKind::TranslatedPatterns { classes, .. } = r.dataset.kind else {
            panic!("image dataset expected")
        };
        let chance = 1.0 / classes as f64;
        let (p, n, g) = (med(&r, "not-progressive"), med(&r, "naive"), med(&r, "guide"));
        (
            complete(&r) && p > n,
            format!(
                "median test accuracy progressive {p:.4} vs naive {n:.4}; untrained guide {g:.4} (chance {chance:.3})"
            ),
            vec![],
        )
    }));

    results.push(timed(10, "group-wise conversion", 15 * 60, Duration::ZERO, || {
        let r = run(&config("deep-to-shallow.toml", "deep-to-shallow")).expect("deep-to-shallow run");
        let method = "not-group-progressive";
        let worst_delta = r
            .seeds
            .iter()
            .flat_map(|s| s.methods.iter().filter(|m| m.method == method))
            .flat_map(|m| m.stages.iter().flat_map(|st| st.final_per_layer.iter().copied()))
            .fold(0.0, f64::max);
        let gaps: Vec<f64> = r
            .seeds
            .iter()
            .filter_map(|s| {
                let g = s.guide.as_ref()?.test_metric;
                let t = s.methods.iter().find(|m| m.method == method)?.test_metric;
                Some(g - t)
            })
            .collect();
        let ok = complete(&r) && gaps.len() == 3 && worst_delta <= 0.3 && gaps.iter().all(|g| *g <= 0.05);
        (
            ok,
            format!(
                "worst per-group CKA dissimilarity {worst_delta:.4}; guide minus target accuracy per seed {gaps:.4?}"
            ),
            vec![],
        )
    }));

    results.push(timed(11, "reproducibility", 5 * 60, Duration::ZERO, || {
        let mut cfg = config("cnn-to-mlp.toml", "rerun");
        cfg.seeds = vec![1];
        cfg.conversion.schedules = vec![ScheduleKind::Progressive];
        let again = run(&cfg).expect("rerun");
        let first = schedules.seeds.iter().find(|s| s.seed == 1).expect("seed 1");
        let second = &again.seeds[0];
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for m in &second.methods {
            let Some(o) = first.methods.iter().find(|x| x.method == m.method) else {
                continue;
            };
            compared += 1;
            worst = worst
                .max((m.test_metric - o.test_metric).abs())
                .max((m.test_loss - o.test_loss).abs())
                .max((m.val_metric - o.val_metric).abs());
        }
        (
            compared == 2 && worst <= 1e-12,
            format!("{compared} methods re-run for seed 1; largest metric difference {worst:.1e}"),
            vec![],
        )
    }));

    let unexpected: Vec<String> = results
        .iter()
        .filter(|c| !c.passed)
        .filter(|c| !(c.id == 1 && c.tolerated_failures == [KNOWN_DEFECT] && c.elapsed <= c.budget))
        .map(Criterion::line)
        .collect();
    emit(&format!(
        "{} of {} criteria passed",
        results.iter().filter(|c| c.passed).count(),
        results.len()
    ));
    assert!(unexpected.is_empty(), "unexpected failures:\n{}", unexpected.join("\n"));
}
