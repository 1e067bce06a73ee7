//! Kernel ridge regression, used as the stage-one mean estimator.
//!
//! With ridge `λ = σ_ξ²` the KRR prediction coincides with the zero-mean GP
//! posterior mean; here the ridge is a free parameter chosen by k-fold
//! cross-validation or a fixed rule.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::kernels::{check_finite_vec, cross_covariance, gram_matrix, select_entries, select_rows, KernelFamily, KernelSpec};
use crate::linalg::Cholesky;
use crate::scalar::{count, Scalar};

/// The ridge grid used for stage-one cross-validation.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone)]
pub struct KrrModel<T: Scalar> {
    spec: KernelSpec<T>,
    x_train: DMatrix<T>,
    dual_weights: DVector<T>,
    lambda: T,
}

impl<T: Scalar> KrrModel<T> {
    pub fn spec(&self) -> &KernelSpec<T> {
        &self.spec
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn dual_weights(&self) -> &DVector<T> {
        &self.dual_weights
    }

    pub fn x_train(&self) -> &DMatrix<T> {
        &self.x_train
    }

    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<DVector<T>> {
        let ks = cross_covariance(&self.spec, &self.x_train, x_star)?;
        Ok(ks.tr_mul(&self.dual_weights))
    }
}

/// Solves `(K + λI) w = y` with the noiseless Gram matrix of `spec`.
pub fn fit_krr<T: Scalar>(spec: &KernelSpec<T>, x: &DMatrix<T>, y: &DVector<T>, lambda: T) -> Result<KrrModel<T>> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(GpError::input(format!("ridge parameter must be positive, got {lambda}")));
    }
    if x.nrows() != y.len() {
        return Err(GpError::input(format!("{} input rows but {} targets", x.nrows(), y.len())));
    }
    check_finite_vec(y, "targets")?;
    let mut k = gram_matrix(spec, x, false)?;
    for i in 0..k.nrows() {
        k[(i, i)] += lambda;
    }
    let chol = Cholesky::factor(&k).ok_or_else(|| {
        GpError::numerical(format!("KRR system (K + {lambda:e} I) is not positive definite"))
    })?;
    Ok(KrrModel { spec: *spec, x_train: x.clone(), dual_weights: chol.solve(y), lambda })
}

/// Result of the ridge/kernel grid search.
#[derive(Debug, Clone)]
pub struct KrrSelection<T: Scalar> {
    /// Index into the candidate list.
    pub candidate: usize,
    pub family: KernelFamily,
    pub lambda: T,
    /// Mean held-out squared error per `(candidate, lambda)` pair, candidate-major.
    pub cv_errors: Vec<T>,
}

/// Picks the `(kernel, λ)` pair with the smallest mean held-out squared error
/// over a deterministic k-fold partition (point `i` is held out in fold
/// `i mod folds`). Ties go to the smaller `λ`, then to the earlier candidate.
///
/// Each candidate is a full [`KernelSpec`] so that the kernel's lengthscale
/// and outputscale are part of the candidate; the noise entry is ignored.
pub fn krr_cross_validate<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    lambdas: &[T],
    candidates: &[KernelSpec<T>],
    folds: usize,
) -> Result<KrrSelection<T>> {
    let n = x.nrows();
    if lambdas.is_empty() || candidates.is_empty() {
        return Err(GpError::input("cross-validation grids must be non-empty"));
    }
    if folds < 2 {
        return Err(GpError::input("cross-validation needs at least two folds"));
    }
    if n < folds {
        return Err(GpError::input(format!("{n} points cannot be split into {folds} folds")));
    }
    if y.len() != n {
        return Err(GpError::input("targets and inputs differ in length"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > T::zero())) {
        return Err(GpError::input(format!("ridge parameter must be positive, got {l}")));
    }

    let mut sse = vec![T::zero(); candidates.len() * lambdas.len()];
    for fold in 0..folds {
        let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let xtr = select_rows(x, &train);
        let ytr = select_entries(y, &train);
        let xte = select_rows(x, &test);
        let yte = select_entries(y, &test);
        for (ci, spec) in candidates.iter().enumerate() {
            let k = gram_matrix(spec, &xtr, false)?;
            let ks = cross_covariance(spec, &xtr, &xte)?;
            for (li, &lambda) in lambdas.iter().enumerate() {
                let mut kl = k.clone();
                for i in 0..kl.nrows() {
                    kl[(i, i)] += lambda;
                }
                let err = match Cholesky::factor(&kl) {
                    Some(ch) => {
                        let w = ch.solve(&ytr);
                        let pred = ks.tr_mul(&w);
                        (pred - &yte).norm_squared()
                    }
                    None => T::max_value().unwrap_or_else(T::one),
                };
                sse[ci * lambdas.len() + li] += err;
            }
        }
    }
    let cv_errors: Vec<T> = sse.into_iter().map(|s| s / count::<T>(n)).collect();

    let mut best: Option<(T, T, usize)> = None;
    for ci in 0..candidates.len() {
        for (li, &lambda) in lambdas.iter().enumerate() {
            let e = cv_errors[ci * lambdas.len() + li];
            let better = match best {
                None => true,
                Some((be, bl, bc)) => e < be || (e == be && (lambda < bl || (lambda == bl && ci < bc))),
            };
            if better {
                best = Some((e, lambda, ci));
            }
        }
    }
    let (_, lambda, candidate) = best.expect("non-empty grid");
    Ok(KrrSelection { candidate, family: candidates[candidate].family, lambda, cv_errors })
}
