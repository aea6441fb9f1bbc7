use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use theseus_core::conversion::{make_schedule, run_conversion, ReplacementMapping, ScheduleKind};
use theseus_core::data::{gen_dataset, Dataset, DatasetKind, DatasetSpec, TaskKind};
use theseus_core::nets::{save_checkpoint, ModuleGraph};
use theseus_core::seed::derive_seed;
use theseus_core::training::{
    evaluate, naive_baseline, progressive_distill, recalibrate_bn, task_train, write_metrics_csv, MetricRow,
    StageReport, TaskOutcome,
};

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub slots: Vec<usize>,
    pub final_per_layer: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub events: usize,
}

impl StageSummary {
    fn from_report(r: &StageReport) -> Self {
        Self {
            stage: r.stage,
            slots: r.slots.clone(),
            final_per_layer: r.final_per_layer.clone(),
            epochs: r.epochs,
            steps: r.records.len(),
            events: r.events.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub params: usize,
    pub test_loss: f64,
    pub test_metric: f64,
    pub val_metric: f64,
    /// Test metric right after conversion and recalibration.
    pub pre_finetune_test_metric: Option<f64>,
    pub best_epoch: usize,
    pub stages: Vec<StageSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideSummary {
    pub trained: bool,
    pub params: usize,
    pub val_metric: f64,
    pub test_metric: f64,
    /// Trained guide below the configured validation accuracy.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub guide: Option<GuideSummary>,
    pub methods: Vec<MethodResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    /// Standard error of the mean; needs two or more seeds.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub task: TaskKind,
    /// "accuracy" or "perplexity".
    pub metric: String,
    pub dataset: DatasetSpec,
    pub seeds: Vec<SeedReport>,
    pub aggregates: Vec<Aggregate>,
    pub flags: Vec<String>,
}

impl RunReport {
    pub fn aggregate(&self, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn method_values(&self, method: &str) -> Vec<(u64, f64)> {
        self.seeds
            .iter()
            .filter_map(|s| {
                let v = if method == "guide" {
                    s.guide.as_ref().map(|g| g.test_metric)
                } else {
                    s.methods.iter().find(|m| m.method == method).map(|m| m.test_metric)
                };
                v.map(|v| (s.seed, v))
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(method: &str, values: &[f64]) -> Aggregate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let stderr = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Aggregate {
        method: method.to_string(),
        n,
        median: median(values),
        mean,
        stderr,
    }
}

/// Output files of a run.
struct Artifacts {
    dir: PathBuf,
    rows: Vec<MetricRow>,
    summary: csv::Writer<fs::File>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut summary = csv::Writer::from_path(dir.join("stage-summary.csv"))?;
        summary.write_record(["seed", "method", "stage", "slot", "final_loss"])?;
        Ok(Self {
            dir: dir.to_path_buf(),
            rows: Vec::new(),
            summary,
        })
    }

    fn task_rows(&mut self, seed: u64, phase: &str, out: &TaskOutcome) {
        for e in &out.history {
            self.rows.push(MetricRow {
                seed,
                phase: phase.to_string(),
                stage: None,
                epoch: e.epoch,
                loss: e.val_loss,
                accuracy_or_perplexity: Some(e.val_metric),
                lr: e.lr,
            });
        }
    }

    fn stage_logs(&mut self, seed: u64, method: &str, reports: &[StageReport]) -> Result<()> {
        let mut f = fs::File::create(self.dir.join(format!("stages-{method}-seed{seed}.jsonl")))?;
        for r in reports {
            f.write_all(r.to_jsonl()?.as_bytes())?;
            for (slot, loss) in r.slots.iter().zip(&r.final_per_layer) {
                self.summary.write_record([
                    seed.to_string(),
                    method.to_string(),
                    r.stage.to_string(),
                    slot.to_string(),
                    loss.to_string(),
                ])?;
            }
            // Per-epoch mean of the stage loss for the metrics table.
            let mut epoch = 0;
            while let Some(first) = r.records.iter().position(|s| s.epoch == epoch) {
                let recs: Vec<_> = r.records[first..].iter().take_while(|s| s.epoch == epoch).collect();
                let mean = recs
                    .iter()
                    .map(|s| s.per_layer_loss.iter().sum::<f64>() / s.per_layer_loss.len() as f64)
                    .sum::<f64>()
                    / recs.len() as f64;
                self.rows.push(MetricRow {
                    seed,
                    phase: format!("align-{method}"),
                    stage: Some(r.stage),
                    epoch,
                    loss: mean,
                    accuracy_or_perplexity: None,
                    lr: recs[0].lr,
                });
                epoch += 1;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.summary.flush()?;
        write_metrics_csv(fs::File::create(self.dir.join("metrics.csv"))?, &self.rows)?;
        Ok(())
    }
}

fn method_name(kind: ScheduleKind, reverse: bool) -> String {
    if reverse {
        format!("not-{}-reversed", kind.name())
    } else {
        format!("not-{}", kind.name())
    }
}

fn finish_target(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut model: ModuleGraph,
    method: &str,
    seed: u64,
    stages: Vec<StageSummary>,
    art: &mut Artifacts,
) -> Result<MethodResult> {
    recalibrate_bn(
        &mut model,
        &data.train.inputs,
        cfg.task.batch_size,
        cfg.conversion.recalibration_passes,
        derive_seed(seed, "recalibrate"),
    )?;
    let pre = evaluate(&model, &data.test, data.task, cfg.task.batch_size)?;
    let out = task_train(
        &mut model,
        data,
        &cfg.task,
        derive_seed(seed, &format!("finetune-{method}")),
    )?;
    art.task_rows(seed, &format!("finetune-{method}"), &out);
    save_checkpoint(&model, &art.dir.join(format!("target-{method}-seed{seed}.bin")))?;
    Ok(MethodResult {
        method: method.to_string(),
        params: model.num_params(),
        test_loss: out.test.loss,
        test_metric: out.test.metric,
        val_metric: out.val.metric,
        pre_finetune_test_metric: Some(pre.metric),
        best_epoch: out.best_epoch,
        stages,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    art: &mut Artifacts,
    report: &mut SeedReport,
) -> Result<()> {
    let spec = cfg.guide.arch.model_spec(data)?;
    let mut guide = ModuleGraph::build(&spec, derive_seed(seed, "guide"))?;
    if cfg.guide.train {
        let tc = cfg.guide.training.as_ref().expect("validated");
        let out = task_train(&mut guide, data, tc, derive_seed(seed, "guide-train"))?;
        art.task_rows(seed, "guide", &out);
    } else {
        // Running statistics of a fresh network are placeholders.
        recalibrate_bn(
            &mut guide,
            &data.train.inputs,
            cfg.task.batch_size,
            cfg.conversion.recalibration_passes,
            derive_seed(seed, "guide-recalibrate"),
        )?;
    }
    guide.set_all_frozen(true);
    let val = evaluate(&guide, &data.val, data.task, cfg.task.batch_size)?;
    let test = evaluate(&guide, &data.test, data.task, cfg.task.batch_size)?;
    // The accuracy bar only means something on the image task.
    let flagged = cfg.guide.train
        && matches!(cfg.dataset.kind, DatasetKind::TranslatedPatterns { .. })
        && val.metric < cfg.guide.min_val_accuracy;
    if flagged {
        log::warn!(
            "seed {seed}: guide validation accuracy {:.3} below threshold",
            val.metric
        );
    }
    report.guide = Some(GuideSummary {
        trained: cfg.guide.train,
        params: guide.num_params(),
        val_metric: val.metric,
        test_metric: test.metric,
        flagged,
    });
    save_checkpoint(&guide, &art.dir.join(format!("guide-seed{seed}.bin")))?;

    let mapping = ReplacementMapping::from_spec(&guide, &cfg.mapping)?;
    for &kind in &cfg.conversion.schedules {
        let mut schedule = make_schedule(kind, guide.k(), cfg.conversion.group_size)?;
        if cfg.conversion.reverse {
            schedule = schedule.reversed()?;
        }
        let method = method_name(kind, cfg.conversion.reverse);
        log::info!("seed {seed}: converting with {method}");
        let conv = run_conversion(
            &guide,
            &mapping,
            &schedule,
            &cfg.conversion.metric,
            &cfg.conversion.trainer,
            data.alignment_inputs(),
            seed,
        )?;
        art.stage_logs(seed, &method, &conv.reports)?;
        let stages = conv.reports.iter().map(StageSummary::from_report).collect();
        let r = finish_target(cfg, data, conv.target, &method, seed, stages, art)?;
        report.methods.push(r);
    }
    if cfg.baselines.naive {
        log::info!("seed {seed}: naive baseline");
        let (model, out) = naive_baseline(&guide, &mapping, data, &cfg.task, seed)?;
        art.task_rows(seed, "naive", &out);
        report.methods.push(MethodResult {
            method: "naive".into(),
            params: model.num_params(),
            test_loss: out.test.loss,
            test_metric: out.test.metric,
            val_metric: out.val.metric,
            pre_finetune_test_metric: None,
            best_epoch: out.best_epoch,
            stages: vec![],
        });
    }
    if let Some(dc) = &cfg.baselines.distill {
        log::info!("seed {seed}: progressive distillation");
        let schedule = make_schedule(ScheduleKind::Progressive, guide.k(), None)?;
        let (model, reports) = progressive_distill(&guide, &mapping, &schedule, data, dc, seed)?;
        art.stage_logs(seed, "distill", &reports)?;
        let stages = reports.iter().map(StageSummary::from_report).collect();
        let r = finish_target(cfg, data, model, "distill", seed, stages, art)?;
        report.methods.push(r);
    }
    Ok(())
}

/// Runs every seed of an experiment and writes `report.json`,
/// `metrics.csv`, `stage-summary.csv`, per-method stage logs and
/// checkpoints under the output directory. A failing seed is recorded in
/// the report and the remaining seeds still run.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = gen_dataset(&cfg.dataset)?;
    let mut art = Artifacts::new(&cfg.output)?;
    fs::write(
        cfg.output.join("dataset.json"),
        serde_json::to_string_pretty(&cfg.dataset)?,
    )?;
    fs::write(cfg.output.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut report = SeedReport {
            seed,
            guide: None,
            methods: vec![],
            error: None,
        };
        if let Err(e) = run_seed(cfg, &data, seed, &mut art, &mut report) {
            log::error!("seed {seed} failed: {e}");
            report.error = Some(e.to_string());
        }
        seeds.push(report);
    }
    art.finish()?;

    let mut methods: Vec<String> = vec!["guide".into()];
    for s in &seeds {
        for m in &s.methods {
            if !methods.contains(&m.method) {
                methods.push(m.method.clone());
            }
        }
    }
    let mut report = RunReport {
        name: cfg.name.clone(),
        task: data.task,
        metric: match data.task {
            TaskKind::Classification => "accuracy".into(),
            TaskKind::Sequence => "perplexity".into(),
        },
        dataset: cfg.dataset.clone(),
        seeds,
        aggregates: vec![],
        flags: vec![],
    };
    for m in &methods {
        let vals: Vec<f64> = report.method_values(m).into_iter().map(|(_, v)| v).collect();
        if !vals.is_empty() {
            report.aggregates.push(summarize(m, &vals));
        }
    }
    for s in &report.seeds {
        if s.guide.as_ref().is_some_and(|g| g.flagged) {
            report
                .flags
                .push(format!("seed {}: guide below validation threshold", s.seed));
        }
        if let Some(e) = &s.error {
            report.flags.push(format!("seed {}: {e}", s.seed));
        }
    }
    fs::write(cfg.output.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
