//! Exact GP posterior, the scaled negative log marginal likelihood and its
//! gradient with respect to the raw hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GpError, Result};
use crate::kernels::{KernelFamily, 
    check_finite, check_finite_vec, cross_covariance, gram_lower_from_distances, symmetric_distances, KernelSpec,
};
use crate::linalg::{smallest_eigenvalue, Cholesky};
use crate::scalar::{count, lit, sigmoid, Scalar};

/// Noise level above which no jitter is ever added.
const JITTER_NOISE_LIMIT: f64 = 1e-3;
/// Jitter added to the diagonal, relative to `σ_f²`.
const JITTER_REL: f64 = 1e-6;
/// Negative variances within this (relative) band are rounding and get clamped.
const VARIANCE_CLAMP_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    Zero,
    External,
}

/// A GP conditioned on training data.
#[derive(Debug, Clone)]
pub struct GpModel<T: Scalar> {
    spec: KernelSpec<T>,
    x_train: DMatrix<T>,
    y_train: DVector<T>,
    mean_mode: MeanMode,
    prior_mean: DVector<T>,
    chol: Cholesky<T>,
    alpha: DVector<T>,
    jitter: T,
}

/// Pointwise predictive mean and variance. The variance includes `σ_ξ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction<T: Scalar> {
    pub mean: DVector<T>,
    pub variance: DVector<T>,
    /// Number of variances that came out slightly negative and were set to 0.
    pub clamped: usize,
}

impl<T: Scalar> PosteriorPrediction<T> {
    pub fn std(&self) -> DVector<T> {
        self.variance.map(|v| v.sqrt())
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

fn validate_data<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>, prior_mean: Option<&DVector<T>>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(GpError::input("need at least one training point"));
    }
    if x.nrows() != y.len() {
        return Err(GpError::input(format!(
            "{} input rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    check_finite(x, "training inputs")?;
    check_finite_vec(y, "training targets")?;
    if let Some(m) = prior_mean {
        if m.len() != y.len() {
            return Err(GpError::input("prior mean length differs from target length"));
        }
        check_finite_vec(m, "prior mean")?;
    }
    Ok(())
}

fn residual<T: Scalar>(y: &DVector<T>, prior_mean: Option<&DVector<T>>) -> DVector<T> {
    match prior_mean {
        Some(m) => y - m,
        None => y.clone(),
    }
}

/// Factors a noisy Gram matrix, adding `1e-6 σ_f²` jitter once if the first
/// attempt fails and the noise is small enough for jitter to be allowed.
pub(crate) fn factor_gram<T: Scalar>(spec: &KernelSpec<T>, k: &DMatrix<T>) -> Result<(Cholesky<T>, T)> {
    if let Some(c) = Cholesky::factor(k) {
        return Ok((c, T::zero()));
    }
    if spec.noise() <= lit(JITTER_NOISE_LIMIT) {
        let sf = spec.outputscale();
        let jitter = lit::<T>(JITTER_REL) * sf * sf;
        if jitter > T::zero() {
            let mut kj = k.clone();
            for i in 0..kj.nrows() {
                kj[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::factor(&kj) {
                return Ok((c, jitter));
            }
        }
    }
    let lambda = smallest_eigenvalue(k);
    Err(GpError::numerical(format!(
        "Cholesky factorization failed for n={} (smallest eigenvalue estimate {:e})",
        k.nrows(),
        lambda
    )))
}

/// Conditions a GP on `(x, y)`. `prior_mean` holds `m(X)`; `None` is the
/// zero-mean prior.
pub fn fit_posterior<T: Scalar>(
    spec: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    prior_mean: Option<&DVector<T>>,
) -> Result<GpModel<T>> {
    validate_data(x, y, prior_mean)?;
    let dist = symmetric_distances(x);
    let k = gram_lower_from_distances(spec, &dist, true);
    let (chol, jitter) = factor_gram(spec, &k)?;
    let r = residual(y, prior_mean);
    let alpha = chol.solve(&r);
    Ok(GpModel {
        spec: *spec,
        x_train: x.clone(),
        y_train: y.clone(),
        mean_mode: if prior_mean.is_some() { MeanMode::External } else { MeanMode::Zero },
        prior_mean: prior_mean.cloned().unwrap_or_else(|| DVector::zeros(y.len())),
        chol,
        alpha,
        jitter,
    })
}

impl<T: Scalar> GpModel<T> {
    pub fn spec(&self) -> &KernelSpec<T> {
        &self.spec
    }

    pub fn x_train(&self) -> &DMatrix<T> {
        &self.x_train
    }

    pub fn y_train(&self) -> &DVector<T> {
        &self.y_train
    }

    pub fn mean_mode(&self) -> MeanMode {
        self.mean_mode
    }

    pub fn prior_mean(&self) -> &DVector<T> {
        &self.prior_mean
    }

    pub fn chol(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// `K_XX⁻¹ (y - m(X))`.
    pub fn alpha(&self) -> &DVector<T> {
        &self.alpha
    }

    /// Diagonal jitter that had to be added during factorization (0 if none).
    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    /// Predictive distribution for a zero-mean model. Models fitted with an
    /// external prior mean must use [`GpModel::predict_with_prior`].
    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<PosteriorPrediction<T>> {
        if self.mean_mode == MeanMode::External {
            return Err(GpError::input(
                "model has an external prior mean; supply m(x*) via predict_with_prior",
            ));
        }
        self.predict_inner(x_star, None)
    }

    /// Predictive distribution with prior mean values `m(x*)` at the queries.
    pub fn predict_with_prior(&self, x_star: &DMatrix<T>, prior_star: &DVector<T>) -> Result<PosteriorPrediction<T>> {
        if prior_star.len() != x_star.nrows() {
            return Err(GpError::input("prior mean at queries has the wrong length"));
        }
        self.predict_inner(x_star, Some(prior_star))
    }

    fn predict_inner(&self, x_star: &DMatrix<T>, prior_star: Option<&DVector<T>>) -> Result<PosteriorPrediction<T>> {
        if x_star.ncols() != self.x_train.ncols() {
            return Err(GpError::input(format!(
                "query dimension {} differs from training dimension {}",
                x_star.ncols(),
                self.x_train.ncols()
            )));
        }
        let ks = cross_covariance(&self.spec, &self.x_train, x_star)?;
        let mut mean = ks.tr_mul(&self.alpha);
        if let Some(m) = prior_star {
            mean += m;
        }
        let v = self.chol.solve_lower(&ks);
        let prior_var = self.spec.prior_variance();
        let tol = lit::<T>(VARIANCE_CLAMP_REL) * if prior_var > T::one() { prior_var } else { T::one() };
        let mut clamped = 0;
        let mut variance = DVector::zeros(x_star.nrows());
        for j in 0..x_star.nrows() {
            let q = v.column(j).norm_squared();
            let mut var = prior_var - q;
            if var < T::zero() {
                if var >= -tol {
                    var = T::zero();
                    clamped += 1;
                } else {
                    return Err(GpError::numerical(format!(
                        "predictive variance {var:e} at query {j} is negative beyond rounding"
                    )));
                }
            }
            variance[j] = var;
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} slightly negative predictive variances to zero");
        }
        Ok(PosteriorPrediction { mean, variance, clamped })
    }

    /// Predictive mean and full covariance (noise on the diagonal).
    pub fn predict_joint(&self, x_star: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        if x_star.ncols() != self.x_train.ncols() {
            return Err(GpError::input("query dimension differs from training dimension"));
        }
        let ks = cross_covariance(&self.spec, &self.x_train, x_star)?;
        let mean = ks.tr_mul(&self.alpha);
        let v = self.chol.solve_lower(&ks);
        let kss = crate::kernels::gram_matrix(&self.spec, x_star, true)?;
        let cov = kss - v.transpose() * &v;
        Ok((mean, cov))
    }
}

/// Reusable evaluator of the scaled NLL on fixed data; pairwise distances are
/// computed once so that repeated evaluations only rebuild the kernel values.
#[derive(Debug, Clone)]
pub struct NllObjective<T: Scalar> {
    dist: DMatrix<T>,
    resid: DVector<T>,
}

impl<T: Scalar> NllObjective<T> {
    pub fn new(x: &DMatrix<T>, y: &DVector<T>, prior_mean: Option<&DVector<T>>) -> Result<Self> {
        validate_data(x, y, prior_mean)?;
        Ok(NllObjective { dist: symmetric_distances(x), resid: residual(y, prior_mean) })
    }

    pub fn n(&self) -> usize {
        self.resid.len()
    }

    /// `(1/2n) (rᵀK⁻¹r + log det K + n log 2π)`.
    pub fn value(&self, spec: &KernelSpec<T>) -> Result<T> {
        let k = gram_lower_from_distances(spec, &self.dist, true);
        let (chol, _) = factor_gram(spec, &k)?;
        Ok(self.value_from(&chol))
    }

    fn value_from(&self, chol: &Cholesky<T>) -> T {
        let n = self.n();
        let z = chol.solve_lower_vec(&self.resid);
        let two_pi = lit::<T>(2.0) * T::pi();
        (z.norm_squared() + chol.log_det() + count::<T>(n) * two_pi.ln()) / (lit::<T>(2.0) * count::<T>(n))
    }

    /// Value and gradient with respect to the raw hyperparameters
    /// (lengthscale, outputscale, noise).
    pub fn value_and_gradient(&self, spec: &KernelSpec<T>) -> Result<(T, [T; 3])> {
        let n = self.n();
        let k = gram_lower_from_distances(spec, &self.dist, true);
        let (chol, _) = factor_gram(spec, &k)?;
        let value = self.value_from(&chol);
        let alpha = chol.solve(&self.resid);
        let kinv = chol.inverse_lower();

        let raw = spec.params.raw();
        let l = spec.lengthscale();
        let sf = spec.outputscale();
        let sn = spec.noise();
        let two: T = lit(2.0);
        let fam = spec.family;
        // Base kernel values are read back from K unless σ_f² is too small
        // for the division to be exact enough.
        let sf2 = sf * sf;
        let inv_l = T::one() / l;
        let sums = if sf2 > lit(1e-30) {
            let inv_sf2 = T::one() / sf2;
            let base = |kij: T, _r: T| kij * inv_sf2;
            match fam {
                KernelFamily::Rbf => {
                    let f = two * inv_l * inv_l * inv_l;
                    self.weighted_sums(&kinv, &alpha, &k, base, |c, r| c * r * r * f)
                }
                KernelFamily::Matern32 => {
                    let s3 = lit::<T>(3.0).sqrt() * inv_l;
                    self.weighted_sums(&kinv, &alpha, &k, base, |c, r| {
                        let a = s3 * r;
                        c * a * a * inv_l / (T::one() + a)
                    })
                }
                KernelFamily::Matern12 => {
                    let f = inv_l * inv_l;
                    self.weighted_sums(&kinv, &alpha, &k, base, |c, r| c * r * f)
                }
            }
        } else {
            let base = |_kij: T, r: T| fam.base_from_distance(r, l);
            self.weighted_sums(&kinv, &alpha, &k, base, |c, r| fam.dlengthscale_from_base(c, r, l))
        };
        let (acc_l, acc_f, trace_w) = sums;

        // Off-diagonal sums above covered only i > j.
        let off_l = two * acc_l;
        let full_f = two * acc_f - trace_w;

        let scale = T::one() / (two * count::<T>(n));
        let g_l = scale * off_l * sf * sf * sigmoid(raw[0]);
        let g_f = scale * full_f * two * sf * sigmoid(raw[1]);
        let g_n = scale * trace_w * two * sn * sigmoid(raw[2]);
        Ok((value, [g_l, g_f, g_n]))
    }

    /// With `W = K⁻¹ - ααᵀ`, returns `Σ_{i>j} W_ij ∂c_ij/∂l`, `Σ_{i≥j} W_ij c_ij`
    /// and `tr W`. Only lower triangles of `kinv` and `k` are read.
    fn weighted_sums<B, D>(&self, kinv: &DMatrix<T>, alpha: &DVector<T>, k: &DMatrix<T>, base: B, dl: D) -> (T, T, T)
    where
        B: Fn(T, T) -> T,
        D: Fn(T, T) -> T,
    {
        let n = self.n();
        let (kinv, dist, k, alpha) = (kinv.as_slice(), self.dist.as_slice(), k.as_slice(), alpha.as_slice());
        let mut acc_l = T::zero();
        let mut acc_f = T::zero();
        let mut trace_w = T::zero();
        for j in 0..n {
            let aj = alpha[j];
            let col = j * n;
            let wjj = kinv[col + j] - aj * aj;
            trace_w += wjj;
            acc_f += wjj; // c(x, x) = 1
            let rows = j + 1..n;
            let lower = kinv[col + j + 1..col + n]
                .iter()
                .zip(&alpha[rows.clone()])
                .zip(&dist[col + j + 1..col + n])
                .zip(&k[col + j + 1..col + n]);
            for (((&kinv_ij, &ai), &r), &kij) in lower {
                let w = kinv_ij - ai * aj;
                let c = base(kij, r);
                acc_l += w * dl(c, r);
                acc_f += w * c;
            }
        }
        (acc_l, acc_f, trace_w)
    }
}

/// Scaled negative log marginal likelihood.
pub fn nll<T: Scalar>(
    spec: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    prior_mean: Option<&DVector<T>>,
) -> Result<T> {
    NllObjective::new(x, y, prior_mean)?.value(spec)
}

/// Gradient of [`nll`] with respect to the raw hyperparameters.
pub fn nll_gradient<T: Scalar>(
    spec: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    prior_mean: Option<&DVector<T>>,
) -> Result<[T; 3]> {
    Ok(NllObjective::new(x, y, prior_mean)?.value_and_gradient(spec)?.1)
}

/// Draws noisy observations `y ~ N(0, K + σ_ξ² I)` at the rows of `x`.
pub fn sample_prior<T: Scalar, R: Rng + ?Sized>(spec: &KernelSpec<T>, x: &DMatrix<T>, rng: &mut R) -> Result<DVector<T>> {
    let k = crate::kernels::gram_matrix(spec, x, true)?;
    let (chol, _) = factor_gram(spec, &k)?;
    let z = DVector::from_fn(x.nrows(), |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal)));
    Ok(chol.l() * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, Hyperparameters, KernelFamily};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(f: KernelFamily, l: f64, sf: f64, sn: f64) -> KernelSpec<f64> {
        KernelSpec::with_constrained(f, l, sf, sn).unwrap()
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn single_point_posterior() {
        let s = spec(KernelFamily::Rbf, 1.0, 1.0, 1.0);
        let m = fit_posterior(&s, &col(&[0.0]), &DVector::from_vec(vec![1.0]), None).unwrap();
        assert!((m.alpha()[0] - 0.5).abs() < 1e-14);
        let p = m.predict(&col(&[0.0])).unwrap();
        assert!((p.mean[0] - 0.5).abs() < 1e-14);
        assert!((p.variance[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn residual_free_alpha_is_zero() {
        let s = spec(KernelFamily::Matern32, 0.8, 1.0, 0.2);
        let x = col(&[0.0, 0.5, 1.7]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.3]);
        let m = fit_posterior(&s, &x, &y, Some(&y)).unwrap();
        assert!(m.alpha().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn vanishing_outputscale_gives_identity_solve() {
        let s = spec(KernelFamily::Rbf, 1.0, 0.0, 1.0);
        let x = col(&[0.0, 0.1, 0.2]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = fit_posterior(&s, &x, &y, None).unwrap();
        assert!((m.alpha() - &y).norm() < 1e-14);
    }

    #[test]
    fn noiseless_interpolation_at_training_points() {
        let s = spec(KernelFamily::Matern32, 1.0, 1.0, 0.0);
        let x = col(&[0.0, 1.0, 2.5, 4.0]);
        let y = DVector::from_vec(vec![0.3, -0.4, 1.1, 0.0]);
        let m = fit_posterior(&s, &x, &y, None).unwrap();
        let p = m.predict(&x).unwrap();
        for i in 0..4 {
            assert!((p.mean[i] - y[i]).abs() < 1e-8);
            assert!(p.variance[i].abs() < 1e-8);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let s = spec(KernelFamily::Rbf, 0.5, 1.3, 0.2);
        let x = col(&[0.0, 0.3, 0.9]);
        let y = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let prior = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let m = fit_posterior(&s, &x, &y, Some(&prior)).unwrap();
        let far = col(&[0.9 + 20.0 * 0.5]);
        let p = m.predict_with_prior(&far, &DVector::from_vec(vec![0.5])).unwrap();
        assert!((p.mean[0] - 0.5).abs() < 1e-6);
        assert!((p.variance[0] - s.prior_variance()).abs() < 1e-6);
        assert!(m.predict(&far).is_err());
    }

    #[test]
    fn nll_single_point_value() {
        let s = spec(KernelFamily::Rbf, 1.0, 1.0, 1.0);
        let v = nll(&s, &col(&[0.0]), &DVector::from_vec(vec![1.0]), None).unwrap();
        assert!((v - 1.5155121234846454).abs() < 1e-12);
    }

    #[test]
    fn nll_residual_free_is_complexity_only() {
        let s = spec(KernelFamily::Matern12, 0.7, 1.2, 0.5);
        let x = col(&[0.0, 0.4, 1.3, 2.0]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let v = nll(&s, &x, &y, Some(&y)).unwrap();
        let k = gram_matrix(&s, &x, true).unwrap();
        let logdet = k.clone().cholesky().unwrap().l().diagonal().map(|d| d.ln()).sum() * 2.0;
        let expected = (logdet + 4.0 * (2.0 * std::f64::consts::PI).ln()) / 8.0;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_is_invariant_under_independent_duplication() {
        // Two copies placed far apart give a block-diagonal K.
        let s = spec(KernelFamily::Rbf, 0.5, 1.0, 0.3);
        let x = col(&[0.0, 0.4, 1.1]);
        let y = DVector::from_vec(vec![0.2, -0.5, 0.9]);
        let x2 = col(&[0.0, 0.4, 1.1, 1000.0, 1000.4, 1001.1]);
        let y2 = DVector::from_vec(vec![0.2, -0.5, 0.9, 0.2, -0.5, 0.9]);
        let a = nll(&s, &x, &y, None).unwrap();
        let b = nll(&s, &x2, &y2, None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn outputscale_gradient_positive_without_residual() {
        let s = spec(KernelFamily::Rbf, 1.0, 0.05, 0.5);
        let x = col(&[0.0, 0.5, 1.0, 3.0]);
        let y = DVector::zeros(4);
        let g = nll_gradient(&s, &x, &y, None).unwrap();
        assert!(g[1] > 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let s = spec(KernelFamily::Rbf, 1.0, 1.0, 1.0);
        let x = col(&[0.0, 1.0]);
        assert!(matches!(
            fit_posterior(&s, &x, &DVector::from_vec(vec![1.0]), None),
            Err(GpError::Input(_))
        ));
        let m = fit_posterior(&s, &x, &DVector::from_vec(vec![1.0, 2.0]), None).unwrap();
        assert!(m.predict(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn duplicate_points_without_noise_use_jitter() {
        let s = spec(KernelFamily::Rbf, 1.0, 1.0, 0.0);
        let x = col(&[0.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let m = fit_posterior(&s, &x, &y, None).unwrap();
        assert!(m.jitter() > 0.0);
        // noise above the limit never receives jitter, and a negative pivot still fails
        let s_noisy = KernelSpec::new(KernelFamily::Rbf, Hyperparameters::from_raw([0.0, 0.0, 0.0]));
        let m2 = fit_posterior(&s_noisy, &x, &y, None).unwrap();
        assert_eq!(m2.jitter(), 0.0);
    }

    #[test]
    fn sample_prior_is_deterministic_per_seed() {
        let s = spec(KernelFamily::Rbf, 1.0, 1.0, 0.3);
        let x = col(&[0.0, 0.5, 1.0]);
        let a = sample_prior(&s, &x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_prior(&s, &x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
