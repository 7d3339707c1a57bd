//! R@k, MRR@k, MAP@k and nDCG@k, plus per-run aggregation.
//!
//! MAP divides by the total number of relevant documents even when that
//! exceeds `k`. nDCG uses gain `2^rel - 1` and discount `log2(j + 1)`.
//! A query without relevant documents yields `None` and is left out of the
//! macro averages.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{RankedList, RelevanceJudgments};
use crate::error::{Error, Result};

pub fn recall_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranking.iter().take(k).filter(|d| relevant.contains(*d)).count();
    Some(hits as f64 / relevant.len() as f64)
}

pub fn mrr_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(
        ranking
            .iter()
            .take(k)
            .position(|d| relevant.contains(d))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
    )
}

pub fn map_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, d) in ranking.iter().take(k).enumerate() {
        if relevant.contains(d) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

fn dcg(gains: impl Iterator<Item = u32>) -> f64 {
    gains
        .enumerate()
        .map(|(j, g)| (2f64.powi(g as i32) - 1.0) / ((j + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let actual = dcg(
        ranking
            .iter()
            .take(k)
            .map(|d| grades.get(*d).copied().unwrap_or(0)),
    );
    Some(actual / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    Recall,
    Mrr,
    Map,
    Ndcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub k: usize,
}

impl Metric {
    pub fn label(&self) -> String {
        let name = match self.kind {
            MetricKind::Recall => "R",
            MetricKind::Mrr => "MRR",
            MetricKind::Map => "MAP",
            MetricKind::Ndcg => "nDCG",
        };
        format!("{name}@{}", self.k)
    }

    fn compute(
        &self,
        ranking: &[&str],
        relevant: &HashSet<&str>,
        grades: &BTreeMap<String, u32>,
    ) -> Option<f64> {
        match self.kind {
            MetricKind::Recall => recall_at_k(ranking, relevant, self.k),
            MetricKind::Mrr => mrr_at_k(ranking, relevant, self.k),
            MetricKind::Map => map_at_k(ranking, relevant, self.k),
            MetricKind::Ndcg => ndcg_at_k(ranking, grades, self.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub recall: Vec<usize>,
    pub mrr: Vec<usize>,
    pub map: Vec<usize>,
    pub ndcg: Vec<usize>,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            recall: vec![3, 5, 10, 20, 50, 100, 200],
            mrr: vec![10],
            map: vec![10],
            ndcg: vec![10],
        }
    }
}

impl Cutoffs {
    /// Columns in report order: recall, MRR, MAP, nDCG.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut out = Vec::new();
        for (kind, ks) in [
            (MetricKind::Recall, &self.recall),
            (MetricKind::Mrr, &self.mrr),
            (MetricKind::Map, &self.map),
            (MetricKind::Ndcg, &self.ndcg),
        ] {
            out.extend(ks.iter().map(|&k| Metric { kind, k }));
        }
        out
    }

    pub fn max_k(&self) -> usize {
        self.metrics().iter().map(|m| m.k).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics().is_empty() {
            return Err(Error::Config("no metric cutoffs".into()));
        }
        if self.metrics().iter().any(|m| m.k == 0) {
            return Err(Error::Config("metric cutoffs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parses `3,5,10`.
pub fn parse_cutoff_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::Config(format!("bad cutoff {t:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Column labels in display order.
    pub columns: Vec<String>,
    /// Macro averages keyed by column label.
    pub mean: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub queries: usize,
    /// Run queries with judgments but no relevant document.
    pub excluded_no_relevant: usize,
    /// Run queries absent from the qrels.
    pub skipped_unjudged: usize,
}

impl MetricReport {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.mean.get(label).copied()
    }

    /// One header row and one value row, values scaled to percent.
    pub fn to_table(&self, system: &str) -> String {
        let width = self.columns.iter().map(String::len).max().unwrap_or(0).max(6);
        let name_w = system.len().max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "system");
        for c in &self.columns {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        out.push_str(&self.table_row(system, name_w, width));
        out
    }

    pub(crate) fn table_row(&self, system: &str, name_w: usize, width: usize) -> String {
        let mut out = String::new();
        let _ = write!(out, "{system:<name_w$}");
        for c in &self.columns {
            let v = self.mean.get(c).copied().unwrap_or(f64::NAN) * 100.0;
            let _ = write!(out, " {v:>width$.2}");
        }
        out.push('\n');
        out
    }
}

/// Header plus one row per system, all sharing the first report's columns.
pub fn comparison_table(reports: &[(&str, &MetricReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let width = first.columns.iter().map(String::len).max().unwrap_or(0).max(6);
    let name_w = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "system");
    for c in &first.columns {
        let _ = write!(out, " {c:>width$}");
    }
    out.push('\n');
    for (name, r) in reports {
        out.push_str(&r.table_row(name, name_w, width));
    }
    out
}

/// Per-query metrics at every cutoff and their macro averages.
pub fn evaluate_run(
    run: &[RankedList],
    qrels: &RelevanceJudgments,
    cutoffs: &Cutoffs,
) -> Result<MetricReport> {
    cutoffs.validate()?;
    if run.is_empty() {
        return Err(Error::Empty("run".into()));
    }
    let metrics = cutoffs.metrics();
    let columns: Vec<String> = metrics.iter().map(Metric::label).collect();
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    let mut skipped = 0;
    let mut seen = BTreeSet::new();
    for list in run {
        if !seen.insert(list.query_id.as_str()) {
            return Err(Error::DuplicateId(list.query_id.clone()));
        }
        let Some(grades) = qrels.grades(&list.query_id) else {
            skipped += 1;
            continue;
        };
        let relevant: HashSet<&str> = grades
            .iter()
            .filter(|(_, &g)| g > 0)
            .map(|(d, _)| d.as_str())
            .collect();
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let ranking: Vec<&str> = list.doc_ids().collect();
        let row: BTreeMap<String, f64> = metrics
            .iter()
            .zip(&columns)
            .filter_map(|(m, label)| m.compute(&ranking, &relevant, grades).map(|v| (label.clone(), v)))
            .collect();
        per_query.insert(list.query_id.clone(), row);
    }
    if skipped > 0 {
        log::warn!("{skipped} run queries have no judgments and were skipped");
    }
    let n = per_query.len();
    let mean = columns
        .iter()
        .map(|c| {
            let v = if n == 0 {
                0.0
            } else {
                per_query.values().map(|r: &BTreeMap<String, f64>| r[c]).sum::<f64>() / n as f64
            };
            (c.clone(), v)
        })
        .collect();
    Ok(MetricReport {
        columns,
        mean,
        per_query,
        queries: n,
        excluded_no_relevant: excluded,
        skipped_unjudged: skipped,
    })
}
