//! Evaluation metrics for Gaussian predictive distributions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GpError, Result};
use crate::gp::PosteriorPrediction;
use crate::linalg::Cholesky;
use crate::scalar::{to_f64, Scalar};

/// Fold NLLs are flagged when their spread exceeds this multiple of the mean.
pub const UNSTABLE_NLL_RATIO: f64 = 10.0;

/// A single fold NLL this many robust standard deviations (1.4826 MAD) from
/// the median also flags the aggregate.
pub const OUTLIER_FOLD_SCALE: f64 = 10.0;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(GpError::input(format!("{what}: lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(GpError::input(format!("{what}: empty input")));
    }
    Ok(())
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn rmse<T: Scalar>(pred: &DVector<T>, truth: &DVector<T>) -> Result<f64> {
    same_len(pred.len(), truth.len(), "rmse")?;
    let sse: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| to_f64(*p - *t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Mean per-point Gaussian NLL `½((y − m)²/σ² + log σ² + log 2π)`.
pub fn test_nll<T: Scalar>(prediction: &PosteriorPrediction<T>, truth: &DVector<T>) -> Result<f64> {
    same_len(prediction.len(), truth.len(), "test nll")?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for i in 0..truth.len() {
        let v = to_f64(prediction.variance[i]);
        if !(v > 0.0) {
            return Err(GpError::numerical(format!("non-positive predictive variance {v} at test point {i}")));
        }
        let r = to_f64(truth[i] - prediction.mean[i]);
        acc += 0.5 * (r * r / v + v.ln() + ln2pi);
    }
    Ok(acc / truth.len() as f64)
}

/// Joint Gaussian NLL under the full predictive covariance, divided by the
/// number of test points.
pub fn joint_test_nll<T: Scalar>(mean: &DVector<T>, cov: &DMatrix<T>, truth: &DVector<T>) -> Result<f64> {
    same_len(mean.len(), truth.len(), "joint test nll")?;
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(GpError::input("covariance shape does not match the mean"));
    }
    let chol = Cholesky::factor(cov)
        .ok_or_else(|| GpError::numerical("predictive covariance is not positive definite"))?;
    let n = mean.len();
    let z = chol.solve_lower_vec(&(truth - mean));
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(0.5 * (to_f64(z.norm_squared()) + to_f64(chol.log_det()) + n as f64 * ln2pi) / n as f64)
}

fn check_std<T: Scalar>(std: &DVector<T>) -> Result<()> {
    if let Some(i) = std.iter().position(|s| !(to_f64(*s) > 0.0)) {
        return Err(GpError::input(format!("non-positive predictive std at point {i}")));
    }
    Ok(())
}

/// Quantile interval coverage error as a fraction: `(1/M) Σ_m |r_m − 1/M|`,
/// with `r_m` the share of truths between the Gaussian quantiles at levels
/// `(m−1)/M` and `m/M` of each point's predictive distribution.
pub fn qice<T: Scalar>(mean: &DVector<T>, std: &DVector<T>, truth: &DVector<T>, bins: usize) -> Result<f64> {
    let (num, den) = qice_ratio(mean, std, truth, bins)?;
    Ok(num as f64 / den as f64)
}

/// [`qice`] times 100.
pub fn qice_percent<T: Scalar>(mean: &DVector<T>, std: &DVector<T>, truth: &DVector<T>, bins: usize) -> Result<f64> {
    let (num, den) = qice_ratio(mean, std, truth, bins)?;
    Ok((100 * num) as f64 / den as f64)
}

// QICE as an exact integer fraction `Σ_m |M c_m − n| / (M² n)`, so the
// extremes come out exact after a single rounding.
fn qice_ratio<T: Scalar>(mean: &DVector<T>, std: &DVector<T>, truth: &DVector<T>, bins: usize) -> Result<(u128, u128)> {
    if bins < 2 {
        return Err(GpError::input(format!("QICE needs at least 2 bins, got {bins}")));
    }
    same_len(mean.len(), truth.len(), "qice")?;
    same_len(std.len(), truth.len(), "qice")?;
    if truth.is_empty() {
        return Err(GpError::input("qice needs at least one point"));
    }
    check_std(std)?;
    let normal = std_normal();
    let z: Vec<f64> = (1..bins).map(|m| normal.inverse_cdf(m as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    for i in 0..truth.len() {
        let (m, s, y) = (to_f64(mean[i]), to_f64(std[i]), to_f64(truth[i]));
        // Bin b holds (q_{b-1}, q_b]; first and last bins are open-ended.
        let b = z.iter().take_while(|&&zq| y > m + s * zq).count();
        counts[b] += 1;
    }
    let (n, m) = (truth.len() as u128, bins as u128);
    let num = counts.iter().map(|&c| (m * c as u128).abs_diff(n)).sum();
    Ok((num, m * m * n))
}

/// RMSE over the `⌊qn⌋` most confident and the `⌊qn⌋` least confident
/// predictions, ranked by predictive std with ties broken by index.
pub fn ua_rmse<T: Scalar>(mean: &DVector<T>, std: &DVector<T>, truth: &DVector<T>, q: f64) -> Result<(f64, f64)> {
    same_len(mean.len(), truth.len(), "ua rmse")?;
    same_len(std.len(), truth.len(), "ua rmse")?;
    if !(q > 0.0 && q <= 0.5) {
        return Err(GpError::input(format!("quantile {q} outside (0, 0.5]")));
    }
    let n = truth.len();
    let k = (q * n as f64).floor() as usize;
    if k == 0 {
        return Err(GpError::input(format!("q = {q} selects no points out of {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| to_f64(std[a]).total_cmp(&to_f64(std[b])).then(a.cmp(&b)));
    let sub_rmse = |idx: &[usize]| {
        (idx.iter().map(|&i| to_f64(mean[i] - truth[i]).powi(2)).sum::<f64>() / idx.len() as f64).sqrt()
    };
    Ok((sub_rmse(&order[..k]), sub_rmse(&order[n - k..])))
}

/// Share of truths inside `m ± z σ` with `z` the `(1 + level)/2` normal quantile.
pub fn coverage<T: Scalar>(mean: &DVector<T>, std: &DVector<T>, truth: &DVector<T>, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GpError::input(format!("coverage level {level} outside (0, 1)")));
    }
    same_len(mean.len(), truth.len(), "coverage")?;
    same_len(std.len(), truth.len(), "coverage")?;
    let z = std_normal().inverse_cdf(0.5 * (1.0 + level));
    let inside = (0..truth.len())
        .filter(|&i| to_f64(truth[i] - mean[i]).abs() <= z * to_f64(std[i]))
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub qice_bins: usize,
    pub ua_quantile: f64,
    pub coverage_level: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { qice_bins: 10, ua_quantile: 0.1, coverage_level: 0.95 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qice_bins < 2 {
            return Err(GpError::input("QICE needs at least 2 bins"));
        }
        if !(self.ua_quantile > 0.0 && self.ua_quantile <= 0.5) {
            return Err(GpError::input("UA quantile must lie in (0, 0.5]"));
        }
        if !(self.coverage_level > 0.0 && self.coverage_level < 1.0) {
            return Err(GpError::input("coverage level must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Metrics for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub nll: f64,
    pub qice_percent: f64,
    pub hc_rmse: f64,
    pub lc_rmse: f64,
    pub coverage: f64,
}

/// Computes every metric. `rmse_scale` multiplies the errors entering the
/// RMSE family (to report them in original target units); NLL, QICE and
/// coverage are computed on the scale of `prediction`.
pub fn evaluate<T: Scalar>(
    prediction: &PosteriorPrediction<T>,
    truth: &DVector<T>,
    cfg: &MetricsConfig,
    rmse_scale: f64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let std = prediction.std();
    let (hc, lc) = ua_rmse(&prediction.mean, &std, truth, cfg.ua_quantile)?;
    Ok(MetricsReport {
        rmse: rmse(&prediction.mean, truth)? * rmse_scale,
        nll: test_nll(prediction, truth)?,
        qice_percent: qice_percent(&prediction.mean, &std, truth, cfg.qice_bins)?,
        hc_rmse: hc * rmse_scale,
        lc_rmse: lc * rmse_scale,
        coverage: coverage(&prediction.mean, &std, truth, cfg.coverage_level)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single fold).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Mean ± std of each metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAggregate {
    pub folds: usize,
    pub rmse: MeanStd,
    pub nll: MeanStd,
    pub qice_percent: MeanStd,
    pub hc_rmse: MeanStd,
    pub lc_rmse: MeanStd,
    pub coverage: MeanStd,
    /// Set when the NLL spread across folds exceeds ten times its mean
    /// magnitude, or one fold sits far outside the others.
    pub nll_unstable: bool,
}

pub fn aggregate(reports: &[MetricsReport]) -> MetricsAggregate {
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let nll_values: Vec<f64> = reports.iter().map(|r| r.nll).collect();
    let nll = MeanStd::of(&nll_values);
    MetricsAggregate {
        folds: reports.len(),
        rmse: col(|r| r.rmse),
        nll,
        qice_percent: col(|r| r.qice_percent),
        hc_rmse: col(|r| r.hc_rmse),
        lc_rmse: col(|r| r.lc_rmse),
        coverage: col(|r| r.coverage),
        nll_unstable: nll_unstable(nll) || has_outlier_fold(&nll_values),
    }
}

pub fn nll_unstable(nll: MeanStd) -> bool {
    !nll.mean.is_finite() || !nll.std.is_finite() || nll.std > UNSTABLE_NLL_RATIO * nll.mean.abs()
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

/// True when some value lies more than [`OUTLIER_FOLD_SCALE`] robust standard
/// deviations from the median. The mean/std rule misses a single blown-up
/// fold: with one outlier among `n` folds, std/mean stays near `sqrt(n)`.
pub fn has_outlier_fold(values: &[f64]) -> bool {
    if values.len() < 3 || values.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let mut v = values.to_vec();
    let med = median_of(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let scale = 1.4826 * median_of(&mut dev);
    let floor = 1e-9 * (1.0 + med.abs());
    values.iter().any(|x| (x - med).abs() > (OUTLIER_FOLD_SCALE * scale).max(floor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert!((rmse(&v(&[2.0, 3.0]), &v(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((rmse(&v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap() - 3.5355339059327378).abs() < 1e-12);
        assert!(rmse(&v(&[0.0]), &v(&[3.0, 4.0])).is_err());
    }

    #[test]
    fn nll_examples() {
        let p = |m: f64, var: f64| PosteriorPrediction { mean: v(&[m]), variance: v(&[var]), clamped: 0 };
        assert!((test_nll(&p(1.0, 1.0), &v(&[1.0])).unwrap() - 0.9189385332046727).abs() < 1e-12);
        let tp = 1.0 / (2.0 * std::f64::consts::PI);
        assert!(test_nll(&p(1.0, tp), &v(&[1.0])).unwrap().abs() < 1e-12);
        assert!((test_nll(&p(0.0, 1.0), &v(&[1.0])).unwrap() - 1.4189385332046727).abs() < 1e-12);
        assert!(test_nll(&p(0.0, 0.0), &v(&[1.0])).is_err());
    }

    #[test]
    fn joint_nll_reduces_to_pointwise_for_diagonal_covariance() {
        let mean = v(&[0.0, 1.0, -1.0]);
        let var = v(&[0.5, 1.0, 2.0]);
        let truth = v(&[0.3, 0.7, -2.0]);
        let pp = PosteriorPrediction { mean: mean.clone(), variance: var.clone(), clamped: 0 };
        let a = test_nll(&pp, &truth).unwrap();
        let b = joint_test_nll(&mean, &DMatrix::from_diagonal(&var), &truth).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn qice_mass_concentration() {
        let n = 7;
        let q = qice_percent(&DVector::zeros(n), &DVector::from_element(n, 1.0), &DVector::from_element(n, -10.0), 5)
            .unwrap();
        assert!((q - 32.0).abs() < 1e-12);
        assert!(qice(&v(&[0.0]), &v(&[1.0]), &v(&[0.0]), 1).is_err());
    }

    #[test]
    fn ua_rmse_examples() {
        let mean = DVector::zeros(10);
        let mut std = DVector::from_element(10, 1.0);
        let mut truth = DVector::zeros(10);
        std[3] = 0.1;
        truth[3] = 0.5;
        std[7] = 5.0;
        truth[7] = 2.0;
        let (hc, lc) = ua_rmse(&mean, &std, &truth, 0.1).unwrap();
        assert_eq!((hc, lc), (0.5, 2.0));
        assert!(ua_rmse(&mean, &std, &truth, 0.05).is_err());
        let (hc, lc) = ua_rmse(&mean, &DVector::from_element(10, 1.0), &mean, 0.2).unwrap();
        assert_eq!((hc, lc), (0.0, 0.0));
    }

    #[test]
    fn coverage_limits() {
        let m = v(&[1.0, 2.0]);
        assert_eq!(coverage(&m, &v(&[0.1, 0.1]), &m, 0.5).unwrap(), 1.0);
        assert_eq!(coverage(&m, &v(&[1e-12, 1e-12]), &v(&[1.5, 2.5]), 0.95).unwrap(), 0.0);
        assert!(coverage(&m, &m, &m, 1.0).is_err());
    }

    #[test]
    fn aggregate_flags_wild_nll() {
        let rep = |nll: f64| MetricsReport { rmse: 1.0, nll, qice_percent: 1.0, hc_rmse: 0.5, lc_rmse: 2.0, coverage: 0.9 };
        let calm = aggregate(&[rep(1.0), rep(1.2), rep(0.9)]);
        assert!(!calm.nll_unstable);
        let wild = aggregate(&[rep(-1.0), rep(-1.2), rep(5.0), rep(-1.1), rep(-1.0)]);
        assert!(wild.nll_unstable);
        assert_eq!(MeanStd::of(&[2.0]).std, 0.0);
    }

    #[test]
    fn one_blown_up_fold_is_an_outlier() {
        let mut folds = vec![-0.4, -0.5, -0.45, -0.38, -0.52, -0.47, -0.41, -0.5, -0.44, -0.46];
        assert!(!has_outlier_fold(&folds));
        folds.push(5000.0);
        // The mean/std rule alone does not fire here.
        assert!(!nll_unstable(MeanStd::of(&folds)));
        assert!(has_outlier_fold(&folds));
        assert!(!has_outlier_fold(&[1.0, 1.0, 1.0]));
        assert!(!has_outlier_fold(&[1.0, 500.0]));
    }
}
