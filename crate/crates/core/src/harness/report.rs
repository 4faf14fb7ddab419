//! Empirical CDFs, percentiles, and per-solver comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One solver's result for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub epoch_id: u64,
    pub solver: String,
    pub error_meters: f64,
    pub heard: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Ascending errors paired with `k/n`, ties kept.
pub fn empirical_cdf(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::Empty("empirical CDF of no errors"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(k, e)| (e, (k + 1) as f64 / n))
        .collect())
}

/// Nearest-rank percentile: the value at rank `⌈p·n⌉` (1-based), `p ∈ (0, 1]`.
pub fn percentile(errors: &[f64], p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("percentile of no errors"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "p",
            reason: format!("must be in (0, 1], got {p}"),
        });
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

/// `⌈p·n⌉` with a small tolerance so that e.g. `0.9·100` is rank 90, not 91.
fn nearest_rank(p: f64, n: usize) -> usize {
    let r = p * n as f64;
    ((r - 1e-9 * r.max(1.0)).ceil() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub solver: String,
    pub count: usize,
    pub p50: f64,
    pub p90: f64,
    pub mean: f64,
    pub convergence_rate: f64,
    /// Ratios against the first solver's row.
    pub p50_ratio: f64,
    pub p90_ratio: f64,
    pub mean_ratio: f64,
}

/// One row per solver, in order of first appearance in `records`.
pub fn compare_report(records: &[ErrorRecord]) -> Result<Vec<ReportRow>> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.solver.as_str()) {
            order.push(&r.solver);
        }
    }
    if order.is_empty() {
        return Err(Error::Empty("report needs at least one solver"));
    }
    let mut rows: Vec<ReportRow> = Vec::with_capacity(order.len());
    for name in order {
        let errs: Vec<f64> = records
            .iter()
            .filter(|r| r.solver == name)
            .map(|r| r.error_meters)
            .collect();
        let converged = records.iter().filter(|r| r.solver == name && r.converged).count();
        let n = errs.len();
        rows.push(ReportRow {
            solver: name.to_string(),
            count: n,
            p50: percentile(&errs, 0.5)?,
            p90: percentile(&errs, 0.9)?,
            mean: errs.iter().sum::<f64>() / n as f64,
            convergence_rate: converged as f64 / n as f64,
            p50_ratio: 1.0,
            p90_ratio: 1.0,
            mean_ratio: 1.0,
        });
    }
    let (b50, b90, bmean) = (rows[0].p50, rows[0].p90, rows[0].mean);
    for r in &mut rows {
        r.p50_ratio = ratio(r.p50, b50);
        r.p90_ratio = ratio(r.p90, b90);
        r.mean_ratio = ratio(r.mean, bmean);
    }
    Ok(rows)
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}
