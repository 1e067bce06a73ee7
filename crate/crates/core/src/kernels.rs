//! Stationary kernel families and covariance assembly.
//!
//! The covariance is `k(x_i, x_j) = σ_f² c(x_i, x_j) + σ_ξ² δ_ij` with a single
//! lengthscale shared across input dimensions. The squared-exponential base
//! kernel is `exp(-‖x_i - x_j‖² / l²)`; note there is no factor ½ in the
//! exponent, so a lengthscale here equals `√2` times the lengthscale of the
//! `exp(-r²/(2l²))` convention.
//!
//! Hyperparameters are stored unconstrained ("raw") and mapped through
//! softplus, so raw `0` corresponds to `ln 2 ≈ 0.693` for every parameter.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::scalar::{lit, sigmoid, softplus, softplus_inverse, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "rbf")]
    Rbf,
    #[serde(rename = "matern32")]
    Matern32,
    #[serde(rename = "matern12")]
    Matern12,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] = [KernelFamily::Rbf, KernelFamily::Matern32, KernelFamily::Matern12];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern12 => "matern12",
        }
    }

    /// Base kernel as a function of the distance `r ≥ 0`.
    #[inline]
    pub fn base_from_distance<T: Scalar>(self, r: T, l: T) -> T {
        match self {
            KernelFamily::Rbf => {
                let s = r / l;
                (-(s * s)).exp()
            }
            KernelFamily::Matern32 => {
                let a = lit::<T>(3.0).sqrt() * r / l;
                (T::one() + a) * (-a).exp()
            }
            KernelFamily::Matern12 => (-(r / l)).exp(),
        }
    }

    /// `∂c/∂l` as a function of the distance.
    #[inline]
    pub fn base_dlengthscale<T: Scalar>(self, r: T, l: T) -> T {
        match self {
            KernelFamily::Rbf => {
                let s = r / l;
                (-(s * s)).exp() * lit::<T>(2.0) * s * s / l
            }
            KernelFamily::Matern32 => {
                let a = lit::<T>(3.0).sqrt() * r / l;
                a * a * (-a).exp() / l
            }
            KernelFamily::Matern12 => {
                let s = r / l;
                (-s).exp() * s / l
            }
        }
    }
}

impl KernelFamily {
    /// `∂c/∂l` given the base value `c` at distance `r`, without another exponential.
    #[inline]
    pub(crate) fn dlengthscale_from_base<T: Scalar>(self, c: T, r: T, l: T) -> T {
        match self {
            KernelFamily::Rbf => {
                let s = r / l;
                c * lit::<T>(2.0) * s * s / l
            }
            KernelFamily::Matern32 => {
                let a = lit::<T>(3.0).sqrt() * r / l;
                c * a * a / ((T::one() + a) * l)
            }
            KernelFamily::Matern12 => c * r / (l * l),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern32" => Ok(KernelFamily::Matern32),
            "matern12" => Ok(KernelFamily::Matern12),
            other => Err(GpError::input(format!(
                "unknown kernel family {other:?} (expected rbf, matern32 or matern12)"
            ))),
        }
    }
}

/// Index of a hyperparameter inside the raw vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Lengthscale,
    Outputscale,
    Noise,
}

impl Param {
    pub const ALL: [Param; 3] = [Param::Lengthscale, Param::Outputscale, Param::Noise];

    pub fn index(self) -> usize {
        match self {
            Param::Lengthscale => 0,
            Param::Outputscale => 1,
            Param::Noise => 2,
        }
    }
}

impl FromStr for Param {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lengthscale" | "l" => Ok(Param::Lengthscale),
            "outputscale" | "sigma_f" => Ok(Param::Outputscale),
            "noise" | "sigma_xi" => Ok(Param::Noise),
            other => Err(GpError::input(format!("unknown hyperparameter {other:?}"))),
        }
    }
}

/// Raw (unconstrained) hyperparameters `[l, σ_f, σ_ξ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters<T: Scalar> {
    raw: [T; 3],
}

impl<T: Scalar> Default for Hyperparameters<T> {
    fn default() -> Self {
        Hyperparameters { raw: [T::zero(); 3] }
    }
}

impl<T: Scalar> Hyperparameters<T> {
    pub fn from_raw(raw: [T; 3]) -> Self {
        Hyperparameters { raw }
    }

    /// Builds from constrained values. Zero maps to a raw value of `-inf`.
    pub fn from_constrained(lengthscale: T, outputscale: T, noise: T) -> Result<Self> {
        for (name, v) in [("lengthscale", lengthscale), ("outputscale", outputscale), ("noise", noise)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(GpError::input(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if lengthscale <= T::zero() {
            return Err(GpError::input("lengthscale must be positive"));
        }
        Ok(Hyperparameters {
            raw: [
                softplus_inverse(lengthscale),
                softplus_inverse(outputscale),
                softplus_inverse(noise),
            ],
        })
    }

    pub fn raw(&self) -> [T; 3] {
        self.raw
    }

    pub fn get(&self, p: Param) -> T {
        softplus(self.raw[p.index()])
    }

    pub fn lengthscale(&self) -> T {
        self.get(Param::Lengthscale)
    }

    pub fn outputscale(&self) -> T {
        self.get(Param::Outputscale)
    }

    pub fn noise(&self) -> T {
        self.get(Param::Noise)
    }

    pub fn constrained(&self) -> [T; 3] {
        [self.lengthscale(), self.outputscale(), self.noise()]
    }

    /// Returns a copy with one constrained value replaced.
    pub fn with(&self, p: Param, value: T) -> Self {
        let mut raw = self.raw;
        raw[p.index()] = softplus_inverse(value);
        Hyperparameters { raw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T: Scalar> {
    pub family: KernelFamily,
    pub params: Hyperparameters<T>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(family: KernelFamily, params: Hyperparameters<T>) -> Self {
        KernelSpec { family, params }
    }

    /// Family with the default `ln 2` initialization for all parameters.
    pub fn default_for(family: KernelFamily) -> Self {
        KernelSpec { family, params: Hyperparameters::default() }
    }

    pub fn with_constrained(family: KernelFamily, lengthscale: T, outputscale: T, noise: T) -> Result<Self> {
        Ok(KernelSpec { family, params: Hyperparameters::from_constrained(lengthscale, outputscale, noise)? })
    }

    pub fn lengthscale(&self) -> T {
        self.params.lengthscale()
    }

    pub fn outputscale(&self) -> T {
        self.params.outputscale()
    }

    pub fn noise(&self) -> T {
        self.params.noise()
    }

    /// `σ_f² + σ_ξ²`, the prior variance of a noisy observation.
    pub fn prior_variance(&self) -> T {
        let sf = self.outputscale();
        let sn = self.noise();
        sf * sf + sn * sn
    }

    /// Noiseless covariance between two points.
    pub fn eval(&self, xi: &[T], xj: &[T]) -> T {
        let sf = self.outputscale();
        sf * sf * self.family.base_from_distance(euclidean(xi, xj), self.lengthscale())
    }
}

pub(crate) fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Base kernel `c(xi, xj)` for a family and lengthscale.
pub fn eval_base<T: Scalar>(family: KernelFamily, lengthscale: T, xi: &[T], xj: &[T]) -> Result<T> {
    if xi.len() != xj.len() {
        return Err(GpError::input(format!(
            "dimension mismatch: {} vs {}",
            xi.len(),
            xj.len()
        )));
    }
    if !(lengthscale > T::zero()) {
        return Err(GpError::input(format!("lengthscale must be positive, got {lengthscale}")));
    }
    Ok(family.base_from_distance(euclidean(xi, xj), lengthscale))
}

pub(crate) fn check_finite<T: Scalar>(x: &DMatrix<T>, what: &str) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % x.nrows(), pos / x.nrows());
        return Err(GpError::input(format!("{what} has a non-finite entry at row {r}, column {c}")));
    }
    Ok(())
}

pub(crate) fn check_finite_vec<T: Scalar>(y: &DVector<T>, what: &str) -> Result<()> {
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(GpError::input(format!("{what} has a non-finite entry at index {i}")));
    }
    Ok(())
}

/// Pairwise Euclidean distances between the rows of `a` and the rows of `b`.
pub fn pairwise_distances<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (n, m, d) = (a.nrows(), b.nrows(), a.ncols());
    let at = a.transpose();
    let bt = b.transpose();
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let bj = bt.column(j);
        for i in 0..n {
            let ai = at.column(i);
            let mut acc = T::zero();
            for k in 0..d {
                let t = ai[k] - bj[k];
                acc += t * t;
            }
            out[(i, j)] = acc.sqrt();
        }
    }
    out
}

pub(crate) fn symmetric_distances<T: Scalar>(x: &DMatrix<T>) -> DMatrix<T> {
    let (n, d) = (x.nrows(), x.ncols());
    let xt = x.transpose();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = xt.column(j);
        for i in (j + 1)..n {
            let xi = xt.column(i);
            let mut acc = T::zero();
            for k in 0..d {
                let t = xi[k] - xj[k];
                acc += t * t;
            }
            let r = acc.sqrt();
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    out
}

/// Covariance matrix of the rows of `x`, with `σ_ξ²` on the diagonal when
/// `include_noise` is set. The result is exactly symmetric.
pub fn gram_matrix<T: Scalar>(spec: &KernelSpec<T>, x: &DMatrix<T>, include_noise: bool) -> Result<DMatrix<T>> {
    if x.nrows() == 0 {
        return Err(GpError::input("gram matrix needs at least one point"));
    }
    check_finite(x, "input matrix")?;
    Ok(gram_from_distances(spec, &symmetric_distances(x), include_noise))
}

pub(crate) fn gram_from_distances<T: Scalar>(spec: &KernelSpec<T>, dist: &DMatrix<T>, include_noise: bool) -> DMatrix<T> {
    let mut k = gram_lower_from_distances(spec, dist, include_noise);
    for j in 1..k.ncols() {
        for i in 0..j {
            k[(i, j)] = k[(j, i)];
        }
    }
    k
}

/// Lower triangle and diagonal of the Gram matrix; the strict upper triangle
/// is zero. Enough for the Cholesky factorization, which reads only the lower
/// half.
pub(crate) fn gram_lower_from_distances<T: Scalar>(
    spec: &KernelSpec<T>,
    dist: &DMatrix<T>,
    include_noise: bool,
) -> DMatrix<T> {
    let n = dist.nrows();
    let sf2 = spec.outputscale() * spec.outputscale();
    let l = spec.lengthscale();
    let diag = if include_noise { sf2 + spec.noise() * spec.noise() } else { sf2 };
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let dcol = dist.column(j);
        let mut kcol = k.column_mut(j);
        kcol[j] = diag;
        for i in (j + 1)..n {
            kcol[i] = sf2 * spec.family.base_from_distance(dcol[i], l);
        }
    }
    k
}

/// Noiseless cross-covariance `K(A, B)` between rows of `a` and rows of `b`.
pub fn cross_covariance<T: Scalar>(spec: &KernelSpec<T>, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(GpError::input(format!(
            "dimension mismatch: {} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    check_finite(b, "query matrix")?;
    let sf2 = spec.outputscale() * spec.outputscale();
    let l = spec.lengthscale();
    Ok(pairwise_distances(a, b).map(|r| sf2 * spec.family.base_from_distance(r, l)))
}

/// Derivatives of the noisy Gram matrix with respect to the three raw
/// hyperparameters, in the order lengthscale, outputscale, noise.
pub fn gram_gradients<T: Scalar>(spec: &KernelSpec<T>, x: &DMatrix<T>) -> Result<[DMatrix<T>; 3]> {
    if x.nrows() == 0 {
        return Err(GpError::input("gram gradients need at least one point"));
    }
    check_finite(x, "input matrix")?;
    Ok(gradients_from_distances(spec, &symmetric_distances(x)))
}

pub(crate) fn gradients_from_distances<T: Scalar>(spec: &KernelSpec<T>, dist: &DMatrix<T>) -> [DMatrix<T>; 3] {
    let n = dist.nrows();
    let raw = spec.params.raw();
    let l = spec.lengthscale();
    let sf = spec.outputscale();
    let sn = spec.noise();
    let two: T = lit(2.0);
    let dl_scale = sf * sf * sigmoid(raw[0]);
    let dsf_scale = two * sf * sigmoid(raw[1]);
    let dsn = two * sn * sigmoid(raw[2]);
    let mut dl = DMatrix::zeros(n, n);
    let mut dsf = DMatrix::zeros(n, n);
    for j in 0..n {
        dsf[(j, j)] = dsf_scale;
        for i in (j + 1)..n {
            let r = dist[(i, j)];
            let a = dl_scale * spec.family.base_dlengthscale(r, l);
            let b = dsf_scale * spec.family.base_from_distance(r, l);
            dl[(i, j)] = a;
            dl[(j, i)] = a;
            dsf[(i, j)] = b;
            dsf[(j, i)] = b;
        }
    }
    let dnoise = DMatrix::from_diagonal_element(n, n, dsn);
    [dl, dsf, dnoise]
}

/// Stacks rows given by `idx` into a new matrix.
pub fn select_rows<T: Scalar>(x: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    let rows: Vec<RowDVector<T>> = idx.iter().map(|&i| x.row(i).into_owned()).collect();
    if rows.is_empty() {
        return DMatrix::zeros(0, x.ncols());
    }
    DMatrix::from_rows(&rows)
}

pub fn select_entries<T: Scalar>(y: &DVector<T>, idx: &[usize]) -> DVector<T> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]))
}
