//! Nearest-neighbour models: each query is predicted from its `w` nearest
//! training points, found by an exact linear scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{choose_stage_one, choose_variance_family, provenance, Provenance, TwoStageConfig};
use crate::error::{GpError, Result};
use crate::gp::{fit_posterior, PosteriorPrediction};
use crate::kernels::{select_entries, select_rows, KernelFamily, KernelSpec};
use crate::krr::fit_krr;
use crate::sampling::random_subsample;
use crate::scalar::{count, to_f64, Scalar};
use crate::training::{train_gp, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalableConfig {
    /// Neighbours per query.
    pub w: usize,
    /// Subsample size for hyperparameter training.
    pub m_train: usize,
    /// Calibration subsample size (baseline only).
    pub m_cal: usize,
    /// Adds the local residual GP mean to the local KRR mean.
    pub add_residual_mean: bool,
}

impl Default for ScalableConfig {
    fn default() -> Self {
        ScalableConfig { w: 50, m_train: 1000, m_cal: 1000, add_residual_mean: false }
    }
}

impl ScalableConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.w == 0 || self.w > n {
            return Err(GpError::input(format!("neighbour count {} must lie in 1..={n}", self.w)));
        }
        if self.m_train < 2 {
            return Err(GpError::input("training subsample needs at least 2 points"));
        }
        Ok(())
    }
}

/// Row-major copy of the training inputs for repeated exact neighbour scans.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T: Scalar> {
    rows: Vec<T>,
    d: usize,
}

impl<T: Scalar> NeighborIndex<T> {
    pub fn new(x: &DMatrix<T>) -> Self {
        let d = x.ncols();
        let rows = x.transpose().as_slice().to_vec();
        NeighborIndex { rows, d }
    }

    pub fn len(&self) -> usize {
        self.rows.len().checked_div(self.d).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of the `w` rows nearest to `q`, nearest first, ties by index.
    /// `exclude` drops one row from consideration.
    pub fn nearest(&self, q: &[T], w: usize, exclude: Option<usize>) -> Vec<usize> {
        // Bounded max-heap of the best candidates so far. Rows arrive in index
        // order, so an equally distant later row never displaces an earlier one.
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(w + 1);
        if w == 0 {
            return Vec::new();
        }
        for (i, r) in self.rows.chunks_exact(self.d.max(1)).enumerate() {
            if Some(i) == exclude {
                continue;
            }
            // Squared distances rank the same as distances.
            let mut acc = T::zero();
            for (a, b) in r.iter().zip(q) {
                let t = *a - *b;
                acc += t * t;
            }
            if heap.len() < w {
                heap.push(Candidate(acc, i));
            } else if heap.peek().is_some_and(|top| acc < top.0) {
                heap.pop();
                heap.push(Candidate(acc, i));
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| c.1).collect()
    }
}

/// Squared distance and row index, ordered lexicographically.
#[derive(Debug, Clone, Copy)]
struct Candidate<T>(T, usize);

impl<T: Scalar> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Candidate<T> {}

impl<T: Scalar> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&other.1))
    }
}

/// Indices of the `w` rows of `x` nearest to `q`, nearest first, ties by
/// index. `exclude` drops one row from consideration.
pub fn nearest_neighbors<T: Scalar>(x: &DMatrix<T>, q: &[T], w: usize, exclude: Option<usize>) -> Vec<usize> {
    NeighborIndex::new(x).nearest(q, w, exclude)
}

fn row<T: Scalar>(x: &DMatrix<T>, i: usize) -> Vec<T> {
    x.row(i).iter().copied().collect()
}

fn query_matrix<T: Scalar>(q: &[T]) -> DMatrix<T> {
    DMatrix::from_row_slice(1, q.len(), q)
}

/// Local KRR prediction at `q` from the rows in `nn`.
fn local_krr<T: Scalar>(
    spec: &KernelSpec<T>,
    lambda: T,
    x: &DMatrix<T>,
    y: &DVector<T>,
    nn: &[usize],
    q: &[T],
) -> Result<T> {
    let m = fit_krr(spec, &select_rows(x, nn), &select_entries(y, nn), lambda)?;
    Ok(m.predict(&query_matrix(q))?[0])
}

/// Local zero-mean GP prediction (mean, variance) at `q` from the rows in `nn`.
fn local_gp<T: Scalar>(spec: &KernelSpec<T>, x: &DMatrix<T>, y: &DVector<T>, nn: &[usize], q: &[T]) -> Result<(T, T)> {
    let m = fit_posterior(spec, &select_rows(x, nn), &select_entries(y, nn), None)?;
    let p = m.predict(&query_matrix(q))?;
    Ok((p.mean[0], p.variance[0]))
}

/// Two-stage nearest-neighbour model: local KRR mean and local zero-mean GP
/// variance on the demeaned targets.
#[derive(Debug, Clone)]
pub struct ScalableModel<T: Scalar> {
    x: DMatrix<T>,
    y: DVector<T>,
    demeaned: DVector<T>,
    mean_spec: KernelSpec<T>,
    lambda: T,
    var_spec: KernelSpec<T>,
    w: usize,
    add_residual_mean: bool,
    provenance: Provenance,
}

impl<T: Scalar> ScalableModel<T> {
    /// Builds the model from fixed kernels. Demeaning uses the local KRR at
    /// each training point with the point itself among its neighbours.
    pub fn from_parts(
        x: &DMatrix<T>,
        y: &DVector<T>,
        mean_spec: &KernelSpec<T>,
        lambda: T,
        var_spec: &KernelSpec<T>,
        w: usize,
        add_residual_mean: bool,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::input("targets and inputs differ in length"));
        }
        if w == 0 || w > x.nrows() {
            return Err(GpError::input(format!("neighbour count {w} must lie in 1..={}", x.nrows())));
        }
        let demeaned = demean_local(x, y, mean_spec, lambda, w)?;
        Ok(ScalableModel {
            x: x.clone(),
            y: y.clone(),
            demeaned,
            mean_spec: *mean_spec,
            lambda,
            var_spec: *var_spec,
            w,
            add_residual_mean,
            provenance: provenance(mean_spec, lambda, var_spec, None, None),
        })
    }

    pub fn demeaned(&self) -> &DVector<T> {
        &self.demeaned
    }

    pub fn x_train(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn y_train(&self) -> &DVector<T> {
        &self.y
    }

    pub fn mean_spec(&self) -> &KernelSpec<T> {
        &self.mean_spec
    }

    pub fn var_spec(&self) -> &KernelSpec<T> {
        &self.var_spec
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn add_residual_mean(&self) -> bool {
        self.add_residual_mean
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<PosteriorPrediction<T>> {
        check_dim(&self.x, x_star)?;
        let n = x_star.nrows();
        let mut mean = DVector::zeros(n);
        let mut variance = DVector::zeros(n);
        let index = NeighborIndex::new(&self.x);
        for i in 0..n {
            let q = row(x_star, i);
            let nn = index.nearest(&q, self.w, None);
            let m1 = local_krr(&self.mean_spec, self.lambda, &self.x, &self.y, &nn, &q)?;
            let (m2, v) = local_gp(&self.var_spec, &self.x, &self.demeaned, &nn, &q)?;
            mean[i] = if self.add_residual_mean { m1 + m2 } else { m1 };
            variance[i] = v;
        }
        Ok(PosteriorPrediction { mean, variance, clamped: 0 })
    }
}

fn check_dim<T: Scalar>(x: &DMatrix<T>, x_star: &DMatrix<T>) -> Result<()> {
    if x.ncols() != x_star.ncols() {
        return Err(GpError::input(format!(
            "query dimension {} differs from training dimension {}",
            x_star.ncols(),
            x.ncols()
        )));
    }
    Ok(())
}

fn demean_local<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>, spec: &KernelSpec<T>, lambda: T, w: usize) -> Result<DVector<T>> {
    let mut out = DVector::zeros(y.len());
    let index = NeighborIndex::new(x);
    for i in 0..y.len() {
        let q = row(x, i);
        let nn = index.nearest(&q, w, None);
        out[i] = y[i] - local_krr(spec, lambda, x, y, &nn, &q)?;
    }
    Ok(out)
}

/// Fits the two-stage nearest-neighbour model. Kernel choice, ridge and both
/// sets of hyperparameters come from a random subsample of `m_train` points
/// (seeded by `cfg.trainer.seed`); predictions use all training points.
pub fn fit_two_stage_scalable<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    sc: &ScalableConfig,
    cfg: &TwoStageConfig,
) -> Result<ScalableModel<T>> {
    cfg.validate()?;
    sc.validate(x.nrows())?;
    let n = x.nrows();
    let mut idx = random_subsample(n, sc.m_train.min(n), cfg.trainer.seed)?;
    idx.sort_unstable();
    let xs = select_rows(x, &idx);
    let ys = select_entries(y, &idx);

    let train = |f: KernelFamily, yy: &DVector<T>| -> Result<KernelSpec<T>> {
        Ok(train_gp(&KernelSpec::default_for(f), &xs, yy, &cfg.trainer)?.0)
    };
    let s1 = choose_stage_one(&xs, &ys, cfg, |f| train(f, &ys)).map_err(|e| e.in_stage("stage one"))?;
    let demeaned = demean_local(x, y, &s1.spec, s1.lambda, sc.w).map_err(|e| e.in_stage("stage one"))?;

    let ds = select_entries(&demeaned, &idx);
    let (var_family, var_search) = choose_variance_family(&xs, &ds, cfg).map_err(|e| e.in_stage("stage two"))?;
    let var_spec = train(var_family, &ds).map_err(|e| e.in_stage("stage two"))?;
    Ok(ScalableModel {
        x: x.clone(),
        y: y.clone(),
        demeaned,
        mean_spec: s1.spec,
        lambda: s1.lambda,
        var_spec,
        w: sc.w,
        add_residual_mean: sc.add_residual_mean,
        provenance: provenance(&s1.spec, s1.lambda, &var_spec, s1.search, var_search),
    })
}

/// Nearest-neighbour GP with a single kernel and no mean stage.
#[derive(Debug, Clone)]
pub struct GpnnModel<T: Scalar> {
    x: DMatrix<T>,
    y: DVector<T>,
    spec: KernelSpec<T>,
    w: usize,
}

impl<T: Scalar> GpnnModel<T> {
    pub fn new(x: &DMatrix<T>, y: &DVector<T>, spec: &KernelSpec<T>, w: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::input("targets and inputs differ in length"));
        }
        if w == 0 || w > x.nrows() {
            return Err(GpError::input(format!("neighbour count {w} must lie in 1..={}", x.nrows())));
        }
        Ok(GpnnModel { x: x.clone(), y: y.clone(), spec: *spec, w })
    }

    pub fn spec(&self) -> &KernelSpec<T> {
        &self.spec
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn x_train(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn y_train(&self) -> &DVector<T> {
        &self.y
    }

    pub fn with_spec(&self, spec: &KernelSpec<T>) -> Self {
        GpnnModel { spec: *spec, ..self.clone() }
    }

    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<PosteriorPrediction<T>> {
        check_dim(&self.x, x_star)?;
        self.predict_rows(x_star, None)
    }

    /// Predicts the rows of `x_star`; with `exclude`, row `i` of the query
    /// leaves training row `exclude[i]` out of its neighbourhood.
    fn predict_rows(&self, x_star: &DMatrix<T>, exclude: Option<&[usize]>) -> Result<PosteriorPrediction<T>> {
        let n = x_star.nrows();
        let mut mean = DVector::zeros(n);
        let mut variance = DVector::zeros(n);
        let index = NeighborIndex::new(&self.x);
        for i in 0..n {
            let q = row(x_star, i);
            let nn = index.nearest(&q, self.w, exclude.map(|e| e[i]));
            let (m, v) = local_gp(&self.spec, &self.x, &self.y, &nn, &q)?;
            mean[i] = m;
            variance[i] = v;
        }
        Ok(PosteriorPrediction { mean, variance, clamped: 0 })
    }
}

/// `Σ (y − m)² / σ² / N`.
pub fn calibration_factor<T: Scalar>(prediction: &PosteriorPrediction<T>, truth: &DVector<T>) -> Result<T> {
    if truth.is_empty() || truth.len() != prediction.len() {
        return Err(GpError::input("calibration set is empty or mismatched"));
    }
    let mut acc = T::zero();
    for i in 0..truth.len() {
        let v = prediction.variance[i];
        if !(v > T::zero()) {
            return Err(GpError::numerical(format!("zero predictive variance at calibration point {i}")));
        }
        let r = truth[i] - prediction.mean[i];
        acc += r * r / v;
    }
    Ok(acc / count::<T>(truth.len()))
}

fn scaled_spec<T: Scalar>(spec: &KernelSpec<T>, cal: T) -> Result<KernelSpec<T>> {
    let s = cal.sqrt();
    KernelSpec::with_constrained(spec.family, spec.lengthscale(), spec.outputscale() * s, spec.noise() * s)
}

/// Rescales `σ_f²` and `σ_ξ²` by the calibration factor on `(x_cal, y_cal)`.
/// Returns the new kernel and the factor before scaling.
pub fn gpnn_calibrate<T: Scalar>(
    model: &GpnnModel<T>,
    x_cal: &DMatrix<T>,
    y_cal: &DVector<T>,
) -> Result<(KernelSpec<T>, T)> {
    let cal = calibration_factor(&model.predict(x_cal)?, y_cal)?;
    Ok((scaled_spec(&model.spec, cal)?, cal))
}

/// Baseline GPNN: train `family` on a random subsample, then calibrate on
/// `m_cal` training points, each predicted from neighbours other than itself.
pub fn fit_gpnn<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    sc: &ScalableConfig,
    family: KernelFamily,
    trainer: &TrainConfig,
) -> Result<GpnnModel<T>> {
    let n = x.nrows();
    sc.validate(n)?;
    let mut idx = random_subsample(n, sc.m_train.min(n), trainer.seed)?;
    idx.sort_unstable();
    let (spec, _) = train_gp(&KernelSpec::default_for(family), &select_rows(x, &idx), &select_entries(y, &idx), trainer)?;
    let model = GpnnModel::new(x, y, &spec, sc.w)?;
    if sc.m_cal == 0 {
        return Ok(model);
    }
    let mut cal_idx = random_subsample(n, sc.m_cal.min(n), trainer.seed.wrapping_add(1))?;
    cal_idx.sort_unstable();
    let pred = model.predict_rows(&select_rows(x, &cal_idx), Some(&cal_idx))?;
    let cal = calibration_factor(&pred, &select_entries(y, &cal_idx))?;
    log::info!("GPNN calibration factor {:.4}", to_f64(cal));
    GpnnModel::new(x, y, &scaled_spec(&spec, cal)?, sc.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TwoStageModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x.row(i).sum().sin() + 0.1 * rng.random_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn heap_selection_matches_a_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..80);
            let d = rng.random_range(1..4);
            // Integer coordinates make ties common.
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3..=3) as f64);
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3..=3) as f64).collect();
            let w = rng.random_range(0..=n + 2);
            let exclude = if rng.random_bool(0.3) { Some(rng.random_range(0..n)) } else { None };
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&i| Some(i) != exclude)
                .map(|i| ((0..d).map(|j| (x[(i, j)] - q[j]).powi(2)).sum(), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = all.into_iter().take(w).map(|(_, i)| i).collect();
            assert_eq!(nearest_neighbors(&x, &q, w, exclude), expected);
        }
    }

    #[test]
    fn neighbour_order_and_ties() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 2.0, -1.0, 1.0, 5.0]);
        assert_eq!(nearest_neighbors(&x, &[0.0], 3, None), vec![0, 2, 3]);
        assert_eq!(nearest_neighbors(&x, &[0.0], 3, Some(0)), vec![2, 3, 1]);
        assert_eq!(nearest_neighbors(&x, &[0.5], 2, None), vec![0, 3]);
    }

    #[test]
    fn all_neighbours_match_exact_two_stage() {
        let (x, y) = data(35, 2, 1);
        let (xs, _) = data(6, 2, 2);
        let ms = KernelSpec::with_constrained(KernelFamily::Rbf, 1.2, 1.0, 0.1).unwrap();
        let vs = KernelSpec::with_constrained(KernelFamily::Matern32, 0.7, 0.5, 0.2).unwrap();
        for add in [false, true] {
            let exact = TwoStageModel::from_parts(&x, &y, &ms, 0.05, &vs, add).unwrap().predict(&xs).unwrap();
            let nn = ScalableModel::from_parts(&x, &y, &ms, 0.05, &vs, 35, add).unwrap().predict(&xs).unwrap();
            assert!((exact.mean - nn.mean).amax() <= 1e-8);
            assert!((exact.variance - nn.variance).amax() <= 1e-8);
        }
    }

    #[test]
    fn interpolates_training_point() {
        let (x, y) = data(30, 1, 3);
        let ms = KernelSpec::with_constrained(KernelFamily::Matern12, 1.0, 1.0, 1e-4).unwrap();
        let m = ScalableModel::from_parts(&x, &y, &ms, 1e-8, &ms, 10, false).unwrap();
        let p = m.predict(&x.rows(4, 1).into_owned()).unwrap();
        assert!((p.mean[0] - y[4]).abs() < 1e-5);
    }

    #[test]
    fn calibration_reaches_one() {
        let (x, y) = data(40, 2, 4);
        let spec = KernelSpec::with_constrained(KernelFamily::Rbf, 0.8, 0.3, 0.05).unwrap();
        let model = GpnnModel::new(&x, &y, &spec, 10).unwrap();
        let (xc, yc) = data(12, 2, 5);
        let (scaled, cal) = gpnn_calibrate(&model, &xc, &yc).unwrap();
        assert!(cal > 0.0);
        let again = calibration_factor(&model.with_spec(&scaled).predict(&xc).unwrap(), &yc).unwrap();
        assert!((again - 1.0).abs() < 1e-6);
    }

    #[test]
    fn calibrated_model_is_a_fixed_point() {
        let (x, y) = data(30, 1, 6);
        let spec = KernelSpec::with_constrained(KernelFamily::Rbf, 0.8, 0.7, 0.2).unwrap();
        let model = GpnnModel::new(&x, &y, &spec, 8).unwrap();
        let (xc, yc) = data(10, 1, 7);
        let (s1, _) = gpnn_calibrate(&model, &xc, &yc).unwrap();
        let (s2, cal2) = gpnn_calibrate(&model.with_spec(&s1), &xc, &yc).unwrap();
        assert!((cal2 - 1.0).abs() < 1e-6);
        for (a, b) in s1.params.constrained().iter().zip(s2.params.constrained().iter()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn doubled_residuals_give_factor_four() {
        let p = PosteriorPrediction {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            variance: DVector::from_vec(vec![1.0, 4.0]),
            clamped: 0,
        };
        let cal: f64 = calibration_factor(&p, &DVector::from_vec(vec![2.0, -4.0])).unwrap();
        assert!((cal - 4.0).abs() < 1e-15);
        let zero = PosteriorPrediction { variance: DVector::zeros(2), ..p };
        assert!(calibration_factor(&zero, &DVector::from_vec(vec![2.0, -4.0])).is_err());
    }

    #[test]
    fn scalable_fit_runs() {
        let (x, y) = data(120, 2, 8);
        let sc = ScalableConfig { w: 15, m_train: 60, m_cal: 30, add_residual_mean: false };
        let cfg = TwoStageConfig {
            variance_kernel: Some(KernelFamily::Rbf),
            trainer: TrainConfig { iterations: 15, ..Default::default() },
            ..Default::default()
        };
        let m = fit_two_stage_scalable(&x, &y, &sc, &cfg).unwrap();
        let (xs, _) = data(5, 2, 9);
        let p = m.predict(&xs).unwrap();
        assert!(p.variance.iter().all(|v| *v > 0.0));
        let g = fit_gpnn(&x, &y, &sc, KernelFamily::Rbf, &cfg.trainer).unwrap();
        assert_eq!(g.predict(&xs).unwrap().len(), 5);
    }
}
