use std::path::PathBuf;

use theseus_cli::compare::compare;
use theseus_cli::gramstats::{gramstats, write_gramstats};
use theseus_cli::{run, ExperimentConfig, HarnessError, RunReport};

const TINY: &str = r#"
name = "tiny"
seeds = [1, 2, 3]

[dataset]
kind = "translated-patterns"
classes = 4
size = 6
template = 3
train = 160
test = 80
noise = 0.2
seed = 5

[guide]
arch = { kind = "toy-cnn", channels = 4, slots = 2 }
training = { epochs = 3, batch_size = 32, schedule = { kind = "constant", lr = 0.01 } }

[mapping]
part = { kind = "low-rank-linear-pair", rank = 8, batch_norm = true, activation = "relu" }

[conversion]
metric = { kind = "cka" }
align = { epochs = 1, batch_size = 32, schedule = { kind = "constant", lr = 0.001 } }

[task]
epochs = 2
batch_size = 32
schedule = { kind = "constant", lr = 0.001 }
"#;

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("harness").join(name)
}

fn tiny(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.name = name.into();
    cfg.output = out_dir(name);
    cfg
}

#[test]
fn three_seed_run_reports_each_seed_and_aggregates() {
    let cfg = tiny("three-seeds");
    let report = run(&cfg).unwrap();
    assert_eq!(report.seeds.len(), 3);
    assert!(report.seeds.iter().all(|s| s.error.is_none()));
    for m in ["guide", "not-progressive", "naive"] {
        let a = report.aggregate(m).unwrap();
        assert_eq!(a.n, 3, "{m}");
        assert!(a.stderr.is_some());
    }
    let dir = &cfg.output;
    for f in [
        "report.json",
        "metrics.csv",
        "stage-summary.csv",
        "dataset.json",
        "config.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("seed,phase,stage,epoch,loss,accuracy_or_perplexity,lr"));
    let summary = std::fs::read_to_string(dir.join("stage-summary.csv")).unwrap();
    // Progressive on two slots: stage 1 has one series, stage 2 has two.
    let seed1: Vec<&str> = summary
        .lines()
        .filter(|l| l.starts_with("1,not-progressive,"))
        .collect();
    assert_eq!(seed1.len(), 3);
    let saved: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);

    let stats = gramstats(
        &dir.join("target-not-progressive-seed1.bin"),
        &dir.join("dataset.json"),
        32,
        10,
    )
    .unwrap();
    assert_eq!(stats.len(), 2);
    let mut csv = Vec::new();
    write_gramstats(&mut csv, &stats).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().next().unwrap().starts_with("slot,"));
    // Diagonal and off-diagonal histograms for each of the two slots.
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 10);
}

#[test]
fn untrained_guide_sits_near_chance() {
    let mut cfg = tiny("untrained");
    cfg.seeds = vec![4];
    cfg.guide.train = false;
    cfg.guide.training = None;
    cfg.baselines.naive = false;
    let report = run(&cfg).unwrap();
    let g = report.seeds[0].guide.as_ref().unwrap();
    assert!(!g.trained && !g.flagged);
    assert!(
        (g.test_metric - 0.25).abs() < 0.15,
        "untrained accuracy {}",
        g.test_metric
    );
}

fn fake_report(name: &str, seeds: &[u64], values: &[(&str, f64)]) -> RunReport {
    let mut r: RunReport = serde_json::from_value(serde_json::json!({
        "name": name,
        "task": "classification",
        "metric": "accuracy",
        "dataset": {"kind": "gaussian-blobs", "classes": 2, "dim": 2, "train": 10, "test": 10, "seed": 0},
        "seeds": [],
        "aggregates": [],
        "flags": [],
    }))
    .unwrap();
    r.seeds = seeds
        .iter()
        .map(|&s| {
            serde_json::from_value(serde_json::json!({"seed": s, "guide": null, "methods": [], "error": null})).unwrap()
        })
        .collect();
    r.aggregates = values
        .iter()
        .map(|(m, v)| theseus_cli::run::summarize(m, &[*v, *v]))
        .collect();
    r
}

#[test]
fn identical_reports_tie_in_name_order() {
    let a = fake_report("b-run", &[1, 2], &[("x", 0.5)]);
    let b = fake_report("a-run", &[1, 2], &[("x", 0.5)]);
    let c = compare(&[a, b]).unwrap();
    let names: Vec<&str> = c.rows.iter().map(|r| r.report.as_str()).collect();
    assert_eq!(names, ["a-run", "b-run"]);
    assert!(c.flags.is_empty());
}

#[test]
fn ranking_follows_the_metric_and_flags_seed_mismatch() {
    let a = fake_report("one", &[1, 2], &[("low", 0.2), ("high", 0.9)]);
    let b = fake_report("two", &[3, 4], &[("mid", 0.5)]);
    let c = compare(&[a, b]).unwrap();
    let order: Vec<&str> = c.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(order, ["high", "mid", "low"]);
    assert!(c.rows.windows(2).all(|w| w[0].median >= w[1].median));
    assert_eq!(c.flags.len(), 1);
    let mut csv = Vec::new();
    c.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv)
        .unwrap()
        .starts_with("rank,report,method,n,median,mean,stderr"));
}

#[test]
fn compare_rejects_mismatched_tasks() {
    let a = fake_report("one", &[1], &[("m", 0.2)]);
    let mut b = fake_report("two", &[1], &[("m", 0.2)]);
    b.dataset.seed = 99;
    assert!(matches!(compare(&[a.clone(), b]), Err(HarnessError::Mismatch(_))));
    assert!(matches!(compare(&[a]), Err(HarnessError::Mismatch(_))));
}

#[test]
fn shipped_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
    }
}
