use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use theseus_cli::checks::{gradient_suite, metric_suite, CheckLine};
use theseus_cli::compare::compare;
use theseus_cli::gramstats::{gramstats, write_gramstats};
use theseus_cli::{run, ExperimentConfig, Result, RunReport};

#[derive(Parser)]
#[command(name = "theseus", about = "Staged network conversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (TOML). THESEUS_SEED and THESEUS_OUT override
    /// the seed list and output directory.
    Run { config: PathBuf },
    /// Rank the methods of two or more run reports.
    Compare {
        reports: Vec<PathBuf>,
        /// Also write the ranking as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check the similarity metrics against brute-force references.
    MetricCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Central-difference gradient checks of every dissimilarity.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gram-value histograms of every slot of a checkpoint.
    Gramstats {
        checkpoint: PathBuf,
        /// Dataset spec as JSON or TOML (a run writes dataset.json).
        dataset: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report_lines(lines: &[CheckLine]) -> bool {
    for l in lines {
        println!("{l}");
    }
    lines.iter().all(|l| l.passed)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run(&cfg)?;
            for a in &report.aggregates {
                let se = a.stderr.map_or("-".into(), |s| format!("{s:.4}"));
                println!(
                    "{:<28} n={} median={:.4} mean={:.4} stderr={se}",
                    a.method, a.n, a.median, a.mean
                );
            }
            for f in &report.flags {
                println!("flag: {f}");
            }
            println!("artifacts in {}", cfg.output.display());
            Ok(report.seeds.iter().all(|s| s.error.is_none()))
        }
        Command::Compare { reports, csv } => {
            let parsed = reports
                .iter()
                .map(|p| Ok(serde_json::from_str::<RunReport>(&fs::read_to_string(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&parsed)?;
            print!("{}", cmp.to_text());
            if let Some(p) = csv {
                cmp.write_csv(fs::File::create(p)?)?;
            }
            Ok(true)
        }
        Command::MetricCheck { seed } => Ok(report_lines(&metric_suite(seed))),
        Command::Gradcheck { seed } => Ok(report_lines(&gradient_suite(seed))),
        Command::Gramstats {
            checkpoint,
            dataset,
            samples,
            bins,
            out,
        } => {
            let stats = gramstats(&checkpoint, &dataset, samples, bins)?;
            match out {
                Some(p) => write_gramstats(fs::File::create(p)?, &stats)?,
                None => write_gramstats(std::io::stdout().lock(), &stats)?,
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
