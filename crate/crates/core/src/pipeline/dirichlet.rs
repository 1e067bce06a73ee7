//! Classification through per-class GP regression on log-Dirichlet targets.
//!
//! A label becomes concentration parameters `α_c` (`1 + ε` for the true
//! class, `ε` otherwise); each class is then a regression target
//! `ỹ_c = ln α_c − σ̃²_c / 2` with heteroscedastic noise `σ̃²_c = ln(1/α_c + 1)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GpError, Result};
use crate::kernels::{cross_covariance, gram_matrix, KernelSpec};
use crate::linalg::Cholesky;
use crate::scalar::{count, lit, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletTargets<T> {
    pub alpha: Vec<T>,
    pub targets: Vec<T>,
    pub noise_var: Vec<T>,
}

pub fn dirichlet_transform<T: Scalar>(class_index: usize, num_classes: usize, alpha_epsilon: T) -> Result<DirichletTargets<T>> {
    if num_classes < 2 {
        return Err(GpError::input(format!("need at least 2 classes, got {num_classes}")));
    }
    if class_index >= num_classes {
        return Err(GpError::input(format!("class {class_index} out of range for {num_classes} classes")));
    }
    if !(alpha_epsilon > T::zero()) {
        return Err(GpError::input("alpha epsilon must be positive"));
    }
    let alpha: Vec<T> = (0..num_classes)
        .map(|c| if c == class_index { alpha_epsilon + T::one() } else { alpha_epsilon })
        .collect();
    let noise_var: Vec<T> = alpha.iter().map(|&a| (T::one() / a + T::one()).ln()).collect();
    let half: T = lit(0.5);
    let targets = alpha.iter().zip(&noise_var).map(|(&a, &s2)| a.ln() - half * s2).collect();
    Ok(DirichletTargets { alpha, targets, noise_var })
}

#[derive(Debug, Clone)]
struct ClassGp<T: Scalar> {
    offset: T,
    chol: Cholesky<T>,
    alpha: DVector<T>,
}

/// One GP per class on the transformed targets, all sharing one kernel. Each
/// class GP uses the mean of its targets as a constant prior mean.
#[derive(Debug, Clone)]
pub struct DirichletClassifier<T: Scalar> {
    spec: KernelSpec<T>,
    x_train: DMatrix<T>,
    classes: Vec<ClassGp<T>>,
}

impl<T: Scalar> DirichletClassifier<T> {
    /// The kernel's noise term is added on top of the per-point Dirichlet noise.
    pub fn fit(spec: &KernelSpec<T>, x: &DMatrix<T>, labels: &[usize], num_classes: usize, alpha_epsilon: T) -> Result<Self> {
        if labels.len() != x.nrows() || labels.is_empty() {
            return Err(GpError::input("labels and inputs differ in length or are empty"));
        }
        let per_point = labels
            .iter()
            .map(|&c| dirichlet_transform(c, num_classes, alpha_epsilon))
            .collect::<Result<Vec<_>>>()?;
        let k = gram_matrix(spec, x, true)?;
        let n = x.nrows();
        let mut classes = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let y = DVector::from_fn(n, |i, _| per_point[i].targets[c]);
            let offset = y.sum() / count::<T>(n);
            let mut kc = k.clone();
            for i in 0..n {
                kc[(i, i)] += per_point[i].noise_var[c];
            }
            let chol = Cholesky::factor(&kc)
                .ok_or_else(|| GpError::numerical(format!("class {c} covariance is not positive definite")))?;
            let alpha = chol.solve(&y.add_scalar(-offset));
            classes.push(ClassGp { offset, chol, alpha });
        }
        Ok(DirichletClassifier { spec: *spec, x_train: x.clone(), classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Latent means and variances, one column per class.
    pub fn predict_latent(&self, x_star: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let ks = cross_covariance(&self.spec, &self.x_train, x_star)?;
        let sf2 = self.spec.outputscale() * self.spec.outputscale();
        let m = x_star.nrows();
        let mut mean = DMatrix::zeros(m, self.classes.len());
        let mut var = DMatrix::zeros(m, self.classes.len());
        for (c, g) in self.classes.iter().enumerate() {
            let mu = ks.tr_mul(&g.alpha);
            let v = g.chol.solve_lower(&ks);
            for j in 0..m {
                mean[(j, c)] = mu[j] + g.offset;
                let s = sf2 - v.column(j).norm_squared();
                var[(j, c)] = if s > T::zero() { s } else { T::zero() };
            }
        }
        Ok((mean, var))
    }

    /// Class probabilities: softmax of latent draws averaged over `samples` draws.
    pub fn predict_proba(&self, x_star: &DMatrix<T>, samples: usize, seed: u64) -> Result<DMatrix<T>> {
        if samples == 0 {
            return Err(GpError::input("need at least one posterior sample"));
        }
        let (mean, var) = self.predict_latent(x_star)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.classes.len();
        let mut probs = DMatrix::zeros(x_star.nrows(), c);
        let mut f = vec![T::zero(); c];
        for j in 0..x_star.nrows() {
            for _ in 0..samples {
                for k in 0..c {
                    let z: T = lit(rng.sample::<f64, _>(StandardNormal));
                    f[k] = mean[(j, k)] + var[(j, k)].sqrt() * z;
                }
                let top = f.iter().copied().fold(f[0], |a, b| if b > a { b } else { a });
                let denom = f.iter().fold(T::zero(), |a, &v| a + (v - top).exp());
                for k in 0..c {
                    probs[(j, k)] += (f[k] - top).exp() / denom;
                }
            }
            let s = count::<T>(samples);
            for k in 0..c {
                probs[(j, k)] /= s;
            }
        }
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    #[test]
    fn unit_alpha_values() {
        // α = 1 for the true class when ε → 0
        let t = dirichlet_transform(0, 2, 1e-300f64).unwrap();
        assert!((t.noise_var[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.targets[0] + 0.34657359027997264).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_gives_small_noise() {
        let t = dirichlet_transform(1, 3, 1e6f64).unwrap();
        assert!(t.noise_var.iter().all(|v| *v < 1e-5));
    }

    #[test]
    fn class_swap_swaps_targets() {
        let a = dirichlet_transform(0, 2, 0.01f64).unwrap();
        let b = dirichlet_transform(1, 2, 0.01f64).unwrap();
        assert_eq!(a.targets[0], b.targets[1]);
        assert_eq!(a.targets[1], b.targets[0]);
        assert_eq!(a.noise_var[0], b.noise_var[1]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(dirichlet_transform(2, 2, 0.01f64).is_err());
        assert!(dirichlet_transform(0, 1, 0.01f64).is_err());
        assert!(dirichlet_transform(0, 2, 0.0f64).is_err());
    }

    #[test]
    fn probabilities_sum_to_one_and_follow_labels() {
        let x = DMatrix::from_column_slice(8, 1, &[-3.0, -2.5, -2.0, -1.5, 1.5, 2.0, 2.5, 3.0]);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let s = KernelSpec::with_constrained(KernelFamily::Rbf, 1.0, 2.0, 1e-3).unwrap();
        let clf = DirichletClassifier::fit(&s, &x, &labels, 2, 0.01).unwrap();
        let q = DMatrix::from_column_slice(3, 1, &[-2.2, 0.0, 2.7]);
        let p = clf.predict_proba(&q, 200, 1).unwrap();
        for j in 0..3 {
            let row_sum: f64 = p.row(j).sum();
            assert!((row_sum - 1.0).abs() <= 1e-12);
            assert!(p.row(j).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(p[(0, 0)] > 0.8);
        assert!(p[(2, 1)] > 0.8);
    }
}
