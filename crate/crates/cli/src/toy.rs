//! One-dimensional toy problems with a strong trend, comparing a zero-mean GP
//! against the two-stage model on interval coverage.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use twostage_gp::metrics::coverage;
use twostage_gp::pipeline::fit_exact_gp;
use twostage_gp::{fit_two_stage_exact, make_folds, KernelFamily, PosteriorPrediction, Result, TrainConfig, TwoStageConfig};

use crate::output::{write_json, write_rows};

pub const TOY_POINTS: usize = 30;
pub const GRID_POINTS: usize = 200;
const DOMAIN: (f64, f64) = (-5.0, 5.0);
const LEVEL: f64 = 0.95;
/// Two-sided 95% standard normal quantile, for the plotted bands.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ToyFigure {
    /// `3x + 2 sin(2πx)`.
    Fig2,
    /// `3|x|^1.5 + 2 sin(2πx)`.
    Fig4,
}

impl ToyFigure {
    pub fn truth(self, x: f64) -> f64 {
        let wiggle = 2.0 * (2.0 * std::f64::consts::PI * x).sin();
        match self {
            ToyFigure::Fig2 => 3.0 * x + wiggle,
            ToyFigure::Fig4 => 3.0 * x.abs().powf(1.5) + wiggle,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyFigure::Fig2 => "fig2",
            ToyFigure::Fig4 => "fig4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySeed {
    pub seed: u64,
    /// Share of all points (train and test) inside the 95% interval.
    pub zero_mean_coverage: f64,
    pub two_stage_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub figure: ToyFigure,
    pub seeds: Vec<ToySeed>,
    pub median_zero_mean_coverage: f64,
    pub median_two_stage_coverage: f64,
}

/// Both fitted predictors of one seed, evaluated on the plotting grid.
pub struct ToyCurves {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub train: Vec<usize>,
    pub grid: Vec<f64>,
    pub zero_mean: PosteriorPrediction<f64>,
    pub two_stage: PosteriorPrediction<f64>,
}

pub fn toy_data(figure: ToyFigure, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(TOY_POINTS, 1, |_, _| rng.random_range(DOMAIN.0..DOMAIN.1));
    let y = DVector::from_fn(TOY_POINTS, |i, _| figure.truth(x[(i, 0)]) + rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Fits both models on an 80/20 split of one seed's data. Both are trained
/// with the same optimizer settings on the raw targets.
pub fn toy_seed(figure: ToyFigure, seed: u64) -> Result<(ToySeed, ToyCurves)> {
    let (x, y) = toy_data(figure, seed);
    let split = make_folds(TOY_POINTS, 1, 0.8, seed)?.remove(0);
    let xtr = DMatrix::from_fn(split.train.len(), 1, |i, _| x[(split.train[i], 0)]);
    let ytr = DVector::from_fn(split.train.len(), |i, _| y[split.train[i]]);
    let trainer = TrainConfig { seed, ..Default::default() };
    let cfg = TwoStageConfig { trainer: trainer.clone(), ..Default::default() };

    let zero = fit_exact_gp(&xtr, &ytr, KernelFamily::Rbf, &trainer)?;
    let two = fit_two_stage_exact(&xtr, &ytr, &cfg)?;
    let cov = |p: PosteriorPrediction<f64>| coverage(&p.mean, &p.std(), &y, LEVEL);
    let zero_mean_coverage = cov(zero.predict(&x)?)?;
    let two_stage_coverage = cov(two.predict(&x)?)?;

    let step = (DOMAIN.1 - DOMAIN.0) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| DOMAIN.0 + step * i as f64).collect();
    let xg = DMatrix::from_column_slice(GRID_POINTS, 1, &grid);
    let curves = ToyCurves {
        zero_mean: zero.predict(&xg)?,
        two_stage: two.predict(&xg)?,
        x,
        y,
        train: split.train,
        grid,
    };
    Ok((ToySeed { seed, zero_mean_coverage, two_stage_coverage }, curves))
}

/// Runs every seed; with `out` set, writes the coverage report and the
/// curves and points of the first seed.
pub fn run_toy(figure: ToyFigure, seeds: &[u64], out: Option<&Path>) -> Result<ToyReport> {
    let mut results = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let (res, curves) = toy_seed(figure, seed)?;
        log::info!(
            "{} seed {seed}: zero-mean coverage {:.3}, two-stage coverage {:.3}",
            figure.name(),
            res.zero_mean_coverage,
            res.two_stage_coverage
        );
        if let (0, Some(dir)) = (k, out) {
            write_curves(figure, &curves, dir)?;
        }
        results.push(res);
    }
    let zm: Vec<f64> = results.iter().map(|r| r.zero_mean_coverage).collect();
    let ts: Vec<f64> = results.iter().map(|r| r.two_stage_coverage).collect();
    let report = ToyReport {
        figure,
        median_zero_mean_coverage: median(&zm),
        median_two_stage_coverage: median(&ts),
        seeds: results,
    };
    if let Some(dir) = out {
        write_json(&dir.join(format!("{}_coverage.json", figure.name())), &report)?;
    }
    Ok(report)
}

fn write_curves(figure: ToyFigure, c: &ToyCurves, dir: &Path) -> Result<()> {
    let band = |p: &PosteriorPrediction<f64>, i: usize| {
        let s = p.variance[i].sqrt();
        [p.mean[i], p.mean[i] - Z95 * s, p.mean[i] + Z95 * s]
    };
    let header = [
        "x", "truth", "zero_mean", "zero_mean_lower", "zero_mean_upper", "two_stage", "two_stage_lower", "two_stage_upper",
    ];
    let rows = (0..c.grid.len()).map(|i| {
        let mut r = vec![c.grid[i], figure.truth(c.grid[i])];
        r.extend(band(&c.zero_mean, i));
        r.extend(band(&c.two_stage, i));
        r.into_iter().map(|v| v.to_string()).collect::<Vec<_>>()
    });
    write_rows(&dir.join(format!("{}_curves.csv", figure.name())), &header, rows)?;
    let rows = (0..c.y.len()).map(|i| {
        let part = if c.train.binary_search(&i).is_ok() { "train" } else { "test" };
        vec![c.x[(i, 0)].to_string(), c.y[i].to_string(), part.to_string()]
    });
    write_rows(&dir.join(format!("{}_points.csv", figure.name())), &["x", "y", "split"], rows)
}
