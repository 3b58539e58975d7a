//! Per-round metric computation and CSV/JSON export.
//!
//! AUC is the rank-based Mann-Whitney statistic with midranks for ties;
//! multiclass scores are macro-averaged one-vs-rest over the classes that
//! have both positive and negative instances. A shard whose labels are
//! single-class has no defined AUC and reports NaN, which aggregation
//! excludes instead of silently counting as 0 or 1.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Arithmetic mean and population standard deviation (divide by n).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Empty("mean_std of an empty sequence".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean over the entries that are defined (non-NaN); NaN when none are.
pub fn mean_defined(xs: &[f64]) -> f64 {
    let defined: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    match mean_std(&defined) {
        Ok((mean, _)) => mean,
        Err(_) => f64::NAN,
    }
}

/// Population std over the defined entries; NaN when none are.
pub fn std_defined(xs: &[f64]) -> f64 {
    let defined: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    match mean_std(&defined) {
        Ok((_, std)) => std,
        Err(_) => f64::NAN,
    }
}

/// Rank-based binary AUC with midranks for tied scores. Returns NaN when
/// labels are single-class (AUC undefined).
pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Integrity(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("auc_score on an empty sequence".into()));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied scores share the midrank
        let mid = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = rank
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Macro-averaged one-vs-rest AUC over per-class probabilities. Classes
/// without both positives and negatives are skipped; NaN when no class
/// qualifies.
pub fn macro_auc(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut aucs = Vec::new();
    for c in 0..probs.ncols() {
        let flags: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let n_pos = flags.iter().filter(|&&f| f).count();
        if n_pos == 0 || n_pos == flags.len() {
            continue;
        }
        let scores: Vec<f64> = probs.column(c).iter().copied().collect();
        if let Ok(a) = auc_score(&scores, &flags) {
            aucs.push(a);
        }
    }
    mean_defined(&aucs)
}

/// One row of the per-round metrics table.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: usize,
    pub avg_train_loss: f64,
    pub avg_test_acc: f64,
    pub std_test_acc: f64,
    pub avg_test_auc: f64,
    pub std_test_auc: f64,
    pub uplink_scalars: usize,
    pub cumulative_uplink_scalars: usize,
    pub per_client_acc: Vec<f64>,
}

/// Full experiment log: row 0 evaluates the shared initial model, then
/// one row per communication round.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Row with the highest averaged test accuracy (first on ties).
    pub fn best_row(&self) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&MetricsRow>, row| match best {
                Some(b) if b.avg_test_acc >= row.avg_test_acc => Some(b),
                _ => Some(row),
            })
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.6}")
}

/// Render the log as CSV: header plus one line per row, reals with six
/// decimal places. Byte-identical across repeated exports of the same log.
pub fn csv_string(log: &MetricsLog) -> String {
    let num_clients = log.rows.first().map_or(0, |r| r.per_client_acc.len());
    let mut out = String::new();
    out.push_str("round,avg_train_loss,avg_test_acc,std_test_acc,avg_test_auc,std_test_auc,uplink_scalars,cumulative_uplink_scalars");
    for i in 0..num_clients {
        let _ = write!(out, ",acc_client_{i}");
    }
    out.push('\n');
    for row in &log.rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.round,
            fmt_real(row.avg_train_loss),
            fmt_real(row.avg_test_acc),
            fmt_real(row.std_test_acc),
            fmt_real(row.avg_test_auc),
            fmt_real(row.std_test_auc),
            row.uplink_scalars,
            row.cumulative_uplink_scalars,
        );
        for acc in &row.per_client_acc {
            let _ = write!(out, ",{}", fmt_real(*acc));
        }
        out.push('\n');
    }
    out
}

pub fn export_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(log)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub avg_train_loss: f64,
    pub avg_test_acc: f64,
    pub std_test_acc: f64,
    pub avg_test_auc: f64,
    pub std_test_auc: f64,
    pub cumulative_uplink_scalars: usize,
}

impl From<&MetricsRow> for RoundSummary {
    fn from(r: &MetricsRow) -> Self {
        Self {
            round: r.round,
            avg_train_loss: r.avg_train_loss,
            avg_test_acc: r.avg_test_acc,
            std_test_acc: r.std_test_acc,
            avg_test_auc: r.avg_test_auc,
            std_test_auc: r.std_test_auc,
            cumulative_uplink_scalars: r.cumulative_uplink_scalars,
        }
    }
}

/// Final-round and best-round metrics. `best_accuracy` is the highest
/// averaged test accuracy reached over all rounds.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub best_accuracy: Option<f64>,
    pub final_round: Option<RoundSummary>,
    pub best_round: Option<RoundSummary>,
}

impl RunSummary {
    pub fn from_log(log: &MetricsLog) -> Self {
        Self {
            rounds: log.rows.len().saturating_sub(1),
            best_accuracy: log.best_row().map(|r| r.avg_test_acc),
            final_round: log.final_row().map(RoundSummary::from),
            best_round: log.best_row().map(RoundSummary::from),
        }
    }
}

pub fn export_summary_json(log: &MetricsLog, path: &Path) -> Result<()> {
    let summary = RunSummary::from_log(log);
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Format(format!("summary serialization failed: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
