//! Multi-seed synthetic benchmark: generate, run, summarize.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::stages::{run_pipeline, PipelineReport};
use super::synth::{generate, write_benchmark, SynthConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Generator settings; the seed is replaced per run.
    pub synth: SynthConfig,
    /// Extra `key = value` lines appended to each generated config.
    pub overrides: String,
    /// Only write the data and configs.
    pub generate_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: PipelineReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub runs: Vec<SeedResult>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl BenchSummary {
    /// Median over seeds of one system's metric.
    pub fn median(&self, system: &str, label: &str) -> Option<f64> {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.report.metric(system, label))
            .collect();
        if v.len() != self.runs.len() {
            return None;
        }
        median(&mut v)
    }

    /// Rows of `system x label`, one column per seed plus the median, in percent.
    pub fn table(&self, systems: &[&str], labels: &[&str]) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:<8}", "system", "metric");
        for r in &self.runs {
            let _ = write!(out, " {:>8}", format!("s{}", r.seed));
        }
        let _ = writeln!(out, " {:>8}", "median");
        for s in systems {
            for l in labels {
                let _ = write!(out, "{s:<10} {l:<8}");
                for r in &self.runs {
                    let v = r.report.metric(s, l).unwrap_or(f64::NAN) * 100.0;
                    let _ = write!(out, " {v:>8.2}");
                }
                let m = self.median(s, l).unwrap_or(f64::NAN) * 100.0;
                let _ = writeln!(out, " {m:>8.2}");
            }
        }
        out
    }
}

/// Config text for a generated benchmark in `dir`.
pub fn bench_config_text(seed: u64, overrides: &str) -> String {
    let mut s = format!(
        "# generated synthetic benchmark\nseed = {seed}\npaths.corpus = corpus.jsonl\n\
         paths.queries = queries.jsonl\npaths.qrels = qrels.tsv\npaths.workdir = work\n"
    );
    if !overrides.trim().is_empty() {
        s.push_str(overrides.trim_end());
        s.push('\n');
    }
    s
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Generates one benchmark per seed and, unless `generate_only`, runs the pipeline on each.
pub fn run_bench(opts: &BenchOptions) -> Result<BenchSummary> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("synth-bench needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in &opts.seeds {
        let dir = seed_dir(&opts.out_dir, seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let bench = generate(&SynthConfig {
            seed,
            ..opts.synth.clone()
        })?;
        write_benchmark(&bench, &dir)?;
        let conf = dir.join("pipeline.conf");
        std::fs::write(&conf, bench_config_text(seed, &opts.overrides))
            .map_err(|e| Error::io(&conf, e))?;
        if opts.generate_only {
            continue;
        }
        log::info!("synth-bench seed {seed}");
        let cfg = PipelineConfig::from_file(&conf)?;
        let outcome = run_pipeline(cfg)?;
        runs.push(SeedResult {
            seed,
            report: outcome.report,
        });
    }
    Ok(BenchSummary { runs })
}
