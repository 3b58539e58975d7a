//! Experiment drivers: a single run with exported artifacts, the 2x2
//! component ablation grid (Fisher weighting x model splitting), and
//! hyperparameter sweeps over `nhead` or `dm`. Grid and sweep cells share
//! the master seed, so they see identical data partitions.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsLog, RunSummary};
use crate::server::{run_experiment, StrategyKind};

/// Files written by [`run_to_dir`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log: MetricsLog,
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub resolved_config: PathBuf,
}

/// Run one experiment and write `metrics.csv`, `summary.json`, and the
/// resolved config into the config's output directory.
pub fn run_to_dir(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let resolved_config = config.output_dir.join("config.resolved.toml");
    std::fs::write(&resolved_config, config.to_toml()?)
        .map_err(|e| Error::io(&resolved_config, e))?;

    let log = run_experiment(config)?;
    let metrics_csv = config.output_dir.join("metrics.csv");
    metrics::export_csv(&log, &metrics_csv)?;
    let summary_json = config.output_dir.join("summary.json");
    metrics::export_summary_json(&log, &summary_json)?;
    Ok(RunArtifacts {
        log,
        metrics_csv,
        summary_json,
        resolved_config,
    })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub use_fim: bool,
    pub use_split: bool,
    /// Per-client per-round uplink scalars.
    pub transmitted_per_client: usize,
    pub summary: RunSummary,
    pub log: MetricsLog,
}

fn per_client_uplink(log: &MetricsLog, clients: usize) -> usize {
    log.rows
        .get(1)
        .map_or(0, |row| row.uplink_scalars / clients.max(1))
}

/// Run the 2x2 grid {Fisher weighting on/off} x {splitting on/off} with a
/// shared seed, in the fixed order (off, off), (on, off), (off, on),
/// (on, on). Split-on cells use the configured `nhead`, raised to 1 if the
/// base config leaves splitting off.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    if config.rounds == 0 {
        return Err(Error::Config("ablation needs rounds >= 1".into()));
    }
    let split_nhead = config.split.nhead.max(1);
    let mut cells = Vec::with_capacity(4);
    for (use_fim, use_split) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cell_config = config.clone();
        cell_config.strategy = StrategyKind::FedSaf;
        cell_config.fim.enabled = use_fim;
        cell_config.split.nhead = if use_split { split_nhead } else { 0 };
        let log = run_experiment(&cell_config)?;
        cells.push(AblationCell {
            use_fim,
            use_split,
            transmitted_per_client: per_client_uplink(&log, config.data.clients),
            summary: RunSummary::from_log(&log),
            log,
        });
    }
    Ok(cells)
}

/// Render the ablation grid as a comparison CSV (final-round metrics).
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(
        "fim,model_splitting,avg_train_loss,avg_test_acc,avg_test_auc,std_test_acc,std_test_auc,transmitted_per_client\n",
    );
    for cell in cells {
        let f = cell.summary.final_round.as_ref();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            cell.use_fim,
            cell.use_split,
            f.map_or(f64::NAN, |r| r.avg_train_loss),
            f.map_or(f64::NAN, |r| r.avg_test_acc),
            f.map_or(f64::NAN, |r| r.avg_test_auc),
            f.map_or(f64::NAN, |r| r.std_test_acc),
            f.map_or(f64::NAN, |r| r.std_test_auc),
            cell.transmitted_per_client,
        );
    }
    out
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Nhead,
    Dm,
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nhead" => Ok(Self::Nhead),
            "dm" => Ok(Self::Dm),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}, expected one of nhead, dm"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParameter::Nhead => f.write_str("nhead"),
            SweepParameter::Dm => f.write_str("dm"),
        }
    }
}

/// One sweep result.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub transmitted_per_client: usize,
    pub summary: RunSummary,
    pub log: MetricsLog,
}

/// Run the base config once per value of the swept parameter, sharing the
/// master seed across runs.
pub fn run_sweep(
    config: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cell_config = config.clone();
        match parameter {
            SweepParameter::Nhead => {
                let nhead: usize = value.parse().map_err(|_| {
                    Error::Config(format!(
                        "invalid nhead value {value:?}, expected an integer"
                    ))
                })?;
                cell_config.split.nhead = nhead;
            }
            SweepParameter::Dm => {
                cell_config.amp.dm = value.parse()?;
            }
        }
        let log = run_experiment(&cell_config)?;
        rows.push(SweepRow {
            value: value.clone(),
            transmitted_per_client: per_client_uplink(&log, config.data.clients),
            summary: RunSummary::from_log(&log),
            log,
        });
    }
    Ok(rows)
}

/// Render sweep results as a comparison CSV.
pub fn sweep_csv(parameter: SweepParameter, rows: &[SweepRow]) -> String {
    let name = match parameter {
        SweepParameter::Nhead => "nhead",
        SweepParameter::Dm => "dm",
    };
    let mut out = format!(
        "{name},avg_train_loss,avg_test_acc,std_test_acc,best_accuracy,transmitted_per_client\n"
    );
    for row in rows {
        let f = row.summary.final_round.as_ref();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            row.value,
            f.map_or(f64::NAN, |r| r.avg_train_loss),
            f.map_or(f64::NAN, |r| r.avg_test_acc),
            f.map_or(f64::NAN, |r| r.std_test_acc),
            row.summary.best_accuracy.unwrap_or(f64::NAN),
            row.transmitted_per_client,
        );
    }
    out
}
