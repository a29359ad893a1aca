//! Aggregation of benchmark rows into per-group quartile tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::BenchResult;
use crate::error::{QsbError, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Overall,
    Size,
    Snr,
    Pdf,
    Dim,
}

impl GroupKey {
    pub const ALL: [GroupKey; 5] = [
        GroupKey::Overall,
        GroupKey::Size,
        GroupKey::Snr,
        GroupKey::Pdf,
        GroupKey::Dim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Overall => "overall",
            GroupKey::Size => "size",
            GroupKey::Snr => "snr",
            GroupKey::Pdf => "pdf",
            GroupKey::Dim => "dim",
        }
    }

    fn value_of(self, r: &BenchResult) -> String {
        match self {
            GroupKey::Overall => "all".into(),
            GroupKey::Size => r.size_level.to_string(),
            GroupKey::Snr => r.snr_class.clone(),
            GroupKey::Pdf => r.pdf_class.clone(),
            GroupKey::Dim => r.dim.to_string(),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKey {
    type Err = QsbError;

    fn from_str(s: &str) -> Result<Self> {
        GroupKey::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                QsbError::Config(format!(
                    "unknown grouping {s:?}; expected one of overall, size, snr, pdf, dim"
                ))
            })
    }
}

/// First quartile, median and third quartile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation sample quantile (the R default, "type 7").
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn quartiles(mut v: Vec<f64>) -> Option<Quartiles> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: sample_quantile(&v, 0.25),
        median: sample_quantile(&v, 0.5),
        q3: sample_quantile(&v, 0.75),
    })
}

/// Summary of one method within one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: GroupKey,
    pub value: String,
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub capped: usize,
    pub e_cq: Option<Quartiles>,
    pub rank: Option<Quartiles>,
    /// Mean of `E_cq(cv) - E_cq(oracle)` over runs that have both.
    pub mean_delta_e: Option<f64>,
}

/// Per-(group value, method) quartiles of `E_cq` and rank.
pub fn summarise(results: &[BenchResult], group: GroupKey) -> Vec<GroupSummary> {
    let mut buckets: BTreeMap<(String, String), Vec<&BenchResult>> = BTreeMap::new();
    for r in results {
        buckets
            .entry((group.value_of(r), r.method.clone()))
            .or_default()
            .push(r);
    }
    buckets
        .into_iter()
        .map(|((value, method), rows)| {
            let deltas: Vec<f64> = rows.iter().filter_map(|r| r.delta_e).collect();
            GroupSummary {
                group,
                value,
                method,
                runs: rows.len(),
                failures: rows.iter().filter(|r| r.error.is_some()).count(),
                capped: rows.iter().filter(|r| r.capped).count(),
                e_cq: quartiles(rows.iter().filter_map(|r| r.e_cq).collect()),
                rank: quartiles(
                    rows.iter()
                        .filter_map(|r| r.rank.map(|k| k as f64))
                        .collect(),
                ),
                mean_delta_e: (!deltas.is_empty())
                    .then(|| deltas.iter().sum::<f64>() / deltas.len() as f64),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[GroupSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "group",
        "value",
        "method",
        "runs",
        "failures",
        "capped",
        "e_cq_q1",
        "e_cq_median",
        "e_cq_q3",
        "rank_q1",
        "rank_median",
        "rank_q3",
        "mean_delta_e",
    ])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.group.to_string(),
            r.value.clone(),
            r.method.clone(),
            r.runs.to_string(),
            r.failures.to_string(),
            r.capped.to_string(),
            f(r.e_cq.map(|q| q.q1)),
            f(r.e_cq.map(|q| q.median)),
            f(r.e_cq.map(|q| q.q3)),
            f(r.rank.map(|q| q.q1)),
            f(r.rank.map(|q| q.median)),
            f(r.rank.map(|q| q.q3)),
            f(r.mean_delta_e),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| QsbError::format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| QsbError::format(e.to_string()))
}

/// Reads `results.json` from a benchmark output directory.
pub fn load_results(dir: &Path) -> Result<Vec<BenchResult>> {
    let path = dir.join("results.json");
    let s = std::fs::read_to_string(&path).map_err(|e| QsbError::io(&path, e))?;
    let rows: Vec<BenchResult> = serde_json::from_str(&s)?;
    if rows.is_empty() {
        return Err(QsbError::format(format!(
            "{} holds no results",
            path.display()
        )));
    }
    Ok(rows)
}

/// Writes `report_<group>.csv` and `report_<group>.json` into `dir`.
pub fn write_report(
    dir: &Path,
    results: &[BenchResult],
    group: GroupKey,
) -> Result<Vec<GroupSummary>> {
    let rows = summarise(results, group);
    write_atomic(
        &dir.join(format!("report_{group}.csv")),
        summary_csv(&rows)?.as_bytes(),
    )?;
    write_atomic(
        &dir.join(format!("report_{group}.json")),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    Ok(rows)
}
