//! How far hyperparameters trained on random subsets land from the full-data
//! optimum, and the full-data NLL surface around that optimum.

use serde::{Deserialize, Serialize};
use twostage_gp::kernels::{select_entries, select_rows};
use twostage_gp::training::nll_contour;
use twostage_gp::{nll, random_subsample, train_gp, GpError, KernelFamily, KernelSpec, Param, Result, TrainConfig};

use crate::data::Dataset;

fn default_subsets() -> Vec<f64> {
    vec![0.1, 0.5, 0.8, 1.0]
}

fn default_train() -> TrainConfig {
    TrainConfig { iterations: 50, ..Default::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourConfig {
    /// CSV file, used by the command line driver.
    pub dataset: Option<std::path::PathBuf>,
    pub has_header: bool,
    pub kernel: KernelFamily,
    /// Fractions of the data to train on; the full data are always trained.
    pub subsets: Vec<f64>,
    pub axes: (Param, Param),
    pub grid_points: usize,
    /// Each axis spans `[v / span, v * span]` geometrically around the
    /// full-data optimum `v`.
    pub grid_span: f64,
    pub train: TrainConfig,
    /// Standardize features and targets of the whole dataset first.
    pub standardize: bool,
    /// Seeds the subset draws.
    pub seed: u64,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            dataset: None,
            has_header: false,
            kernel: KernelFamily::Rbf,
            subsets: default_subsets(),
            axes: (Param::Lengthscale, Param::Noise),
            grid_points: 21,
            grid_span: 4.0,
            train: default_train(),
            standardize: true,
            seed: 0,
        }
    }
}

impl ContourConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsets.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(GpError::input("subset fractions must lie in (0, 1]"));
        }
        if self.axes.0 == self.axes.1 {
            return Err(GpError::input("contour axes must differ"));
        }
        if self.grid_points < 2 || !(self.grid_span > 1.0) {
            return Err(GpError::input("grid needs at least 2 points per axis and a span above 1"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetOptimum {
    pub fraction: f64,
    pub size: usize,
    /// Constrained (lengthscale, outputscale, noise).
    pub hyperparameters: [f64; 3],
    /// NLL of these hyperparameters on the full data.
    pub full_data_nll: f64,
    /// Euclidean distance to the full-data optimum in log hyperparameters.
    pub distance_to_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourReport {
    pub kernel: KernelFamily,
    pub axes: (Param, Param),
    pub full_optimum: [f64; 3],
    pub subsets: Vec<SubsetOptimum>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// `values[i][j]` is the full-data NLL at `(first[i], second[j])`.
    pub values: Vec<Vec<f64>>,
    pub grid_argmin: (usize, usize),
    /// Grid cell nearest the full-data optimum.
    pub optimum_cell: (usize, usize),
}

fn log_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p.ln() - q.ln()).powi(2)).sum::<f64>().sqrt()
}

fn geometric_axis(centre: f64, span: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = ((centre / span).ln(), (centre * span).ln());
    (0..points).map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp()).collect()
}

fn nearest(axis: &[f64], v: f64) -> usize {
    (0..axis.len())
        .min_by(|&a, &b| (axis[a].ln() - v.ln()).abs().total_cmp(&(axis[b].ln() - v.ln()).abs()))
        .unwrap_or(0)
}

pub fn run_contour(cfg: &ContourConfig, data: &Dataset) -> Result<ContourReport> {
    cfg.validate()?;
    let (x, y) = if cfg.standardize {
        let (x, y, _) = data.standardized()?;
        (x, y)
    } else {
        (data.features.clone(), data.targets.clone())
    };
    let n = x.nrows();
    let init = KernelSpec::default_for(cfg.kernel);
    let trainer = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let full = train_gp(&init, &x, &y, &trainer)?.0;
    let full_optimum = full.params.constrained();

    let mut subsets = Vec::with_capacity(cfg.subsets.len());
    for &fraction in &cfg.subsets {
        let size = ((fraction * n as f64).round() as usize).clamp(2, n);
        let spec = if size == n {
            full
        } else {
            let mut idx = random_subsample(n, size, cfg.seed)?;
            idx.sort_unstable();
            train_gp(&init, &select_rows(&x, &idx), &select_entries(&y, &idx), &trainer)?.0
        };
        let hyperparameters = spec.params.constrained();
        subsets.push(SubsetOptimum {
            fraction,
            size,
            hyperparameters,
            full_data_nll: nll(&spec, &x, &y, None)?,
            distance_to_full: log_distance(&hyperparameters, &full_optimum),
        });
    }

    let (a, b) = cfg.axes;
    let first = geometric_axis(full_optimum[a.index()], cfg.grid_span, cfg.grid_points);
    let second = geometric_axis(full_optimum[b.index()], cfg.grid_span, cfg.grid_points);
    let grid = nll_contour(&full, &x, &y, cfg.axes, &first, &second)?;
    let values = (0..grid.values.nrows()).map(|i| grid.values.row(i).iter().copied().collect()).collect();
    Ok(ContourReport {
        kernel: cfg.kernel,
        axes: cfg.axes,
        full_optimum,
        subsets,
        grid_argmin: grid.argmin(),
        optimum_cell: (nearest(&first, full_optimum[a.index()]), nearest(&second, full_optimum[b.index()])),
        first,
        second,
        values,
    })
}
