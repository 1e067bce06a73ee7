//! Repeated random-split benchmark: standardize each fold with its training
//! moments, fit, predict the held-out part and aggregate metrics.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twostage_gp::metrics::{aggregate, evaluate, MetricsAggregate, MetricsReport};
use twostage_gp::{make_folds, GpError, Result};

use crate::config::{ExperimentConfig, Method, NllMode, NllScale};
use crate::data::Dataset;
use crate::models::{fit_method, joint_nll, ModelSummary};
use crate::output::{write_json, write_rows};

/// Share of folds allowed to fail before the run is an error.
pub const MAX_FAILED_FOLDS: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Option<MetricsReport>,
    pub model: Option<ModelSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub method: Method,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub nll_mode: NllMode,
    pub nll_scale: NllScale,
    pub folds: Vec<FoldRecord>,
    pub failed_folds: Vec<usize>,
    /// Over the successful folds.
    pub aggregate: MetricsAggregate,
    /// Seconds since the Unix epoch; the only field that differs between
    /// identical runs.
    pub timestamp: u64,
}

impl BenchmarkReport {
    pub fn successful_metrics(&self) -> Vec<MetricsReport> {
        self.folds.iter().filter_map(|f| f.metrics.clone()).collect()
    }
}

fn run_fold(cfg: &ExperimentConfig, data: &Dataset, fold: usize, split: &twostage_gp::FoldSplit) -> Result<(MetricsReport, ModelSummary)> {
    let f = data.standardized_fold(split)?;
    let seed = cfg.seed.wrapping_add(fold as u64);
    let (model, summary) = fit_method(cfg, &f.x_train, &f.y_train, seed)?;
    let pred = model.predict(&f.x_test)?;
    let mut m = evaluate(&pred, &f.y_test, &cfg.metrics, f.stats.y_std)?;
    if cfg.nll_mode == NllMode::Joint {
        m.nll = joint_nll(&model, &pred, &f.x_test, &f.y_test)?;
    }
    if cfg.nll_scale == NllScale::Original {
        m.nll += f.stats.y_std.ln();
    }
    Ok((m, summary))
}

/// Runs every fold of one dataset on the current rayon pool. Results are
/// collected in fold order, so the report does not depend on scheduling.
pub fn run_benchmark(cfg: &ExperimentConfig, data: &Dataset) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let splits = make_folds(data.len(), cfg.n_folds, cfg.train_fraction, cfg.seed)?;
    let folds: Vec<FoldRecord> = splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| {
            let base = FoldRecord {
                fold: i,
                n_train: split.train.len(),
                n_test: split.test.len(),
                metrics: None,
                model: None,
                error: None,
            };
            match run_fold(cfg, data, i, split) {
                Ok((m, s)) => FoldRecord { metrics: Some(m), model: Some(s), ..base },
                Err(e) => {
                    log::warn!("{}: fold {i} failed: {e}", data.name);
                    FoldRecord { error: Some(e.to_string()), ..base }
                }
            }
        })
        .collect();
    let failed_folds: Vec<usize> = folds.iter().filter(|f| f.error.is_some()).map(|f| f.fold).collect();
    if failed_folds.len() as f64 > MAX_FAILED_FOLDS * folds.len() as f64 {
        let first = folds.iter().find_map(|f| f.error.clone()).unwrap_or_default();
        return Err(GpError::procedure(format!(
            "{}: {} of {} folds failed (first: {first})",
            data.name,
            failed_folds.len(),
            folds.len()
        )));
    }
    let ok: Vec<MetricsReport> = folds.iter().filter_map(|f| f.metrics.clone()).collect();
    let report = BenchmarkReport {
        dataset: data.name.clone(),
        method: cfg.method,
        n: data.len(),
        d: data.dim(),
        seed: cfg.seed,
        nll_mode: cfg.nll_mode,
        nll_scale: cfg.nll_scale,
        aggregate: aggregate(&ok),
        folds,
        failed_folds,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    if report.aggregate.nll_unstable {
        log::warn!(
            "{}: NLL {:.3} ± {:.3} across folds is unstable",
            data.name,
            report.aggregate.nll.mean,
            report.aggregate.nll.std
        );
    }
    Ok(report)
}

/// Writes `<stem>_report.json` and `<stem>_folds.csv` into `dir`; returns the
/// two paths.
pub fn write_benchmark(report: &BenchmarkReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let method = serde_json::to_value(report.method).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let stem = format!("{}_{method}", report.dataset);
    let json = dir.join(format!("{stem}_report.json"));
    let csv = dir.join(format!("{stem}_folds.csv"));
    write_json(&json, report)?;
    let header = ["fold", "status", "rmse", "nll", "qice_percent", "hc_rmse", "lc_rmse", "coverage", "error"];
    let rows = report.folds.iter().map(|f| match &f.metrics {
        Some(m) => {
            let mut r = vec![f.fold.to_string(), "ok".into()];
            r.extend([m.rmse, m.nll, m.qice_percent, m.hc_rmse, m.lc_rmse, m.coverage].map(|v| v.to_string()));
            r.push(String::new());
            r
        }
        None => {
            let mut r = vec![f.fold.to_string(), "failed".into()];
            r.extend(std::iter::repeat_n(String::new(), 6));
            r.push(f.error.clone().unwrap_or_default());
            r
        }
    });
    write_rows(&csv, &header, rows)?;
    Ok((json, csv))
}
