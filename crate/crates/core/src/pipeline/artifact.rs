//! Versioned JSON model artifacts.
//!
//! An artifact stores the fitted kernels together with the (standardized)
//! training data inline; loading it re-runs the deterministic conditioning
//! step, so a round trip reproduces predictions exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GpnnModel, ScalableModel, TwoStageModel};
use crate::error::{GpError, Result};
use crate::gp::{fit_posterior, GpModel, PosteriorPrediction};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::scalar::{lit, to_f64, Scalar};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ExactGp,
    TwoStageExact,
    TwoStageScalable,
    Gpnn,
}

/// Kernel family with constrained hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRecord {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub outputscale: f64,
    pub noise: f64,
}

impl KernelRecord {
    pub fn from_spec<T: Scalar>(s: &KernelSpec<T>) -> Self {
        KernelRecord {
            family: s.family,
            lengthscale: to_f64(s.lengthscale()),
            outputscale: to_f64(s.outputscale()),
            noise: to_f64(s.noise()),
        }
    }

    pub fn to_spec<T: Scalar>(&self) -> Result<KernelSpec<T>> {
        KernelSpec::with_constrained(self.family, lit(self.lengthscale), lit(self.outputscale), lit(self.noise))
    }
}

/// Per-column affine maps fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    /// Column means and population standard deviations; a constant column
    /// gets std 1 so it passes through centred.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_std) = (0..x.ncols())
            .map(|j| mean_std(x.column(j).iter().copied()))
            .unzip();
        let (y_mean, y_std) = mean_std(y.iter().copied());
        Standardization { x_mean, x_std, y_mean, y_std }
    }

    pub fn identity(d: usize) -> Self {
        Standardization { x_mean: vec![0.0; d], x_std: vec![1.0; d], y_mean: 0.0, y_std: 1.0 }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(GpError::input(format!("expected {} features, got {}", self.x_mean.len(), x.ncols())));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j]))
    }

    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn invert_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub version: u32,
    pub kind: ModelKind,
    pub mean_kernel: Option<KernelRecord>,
    pub ridge: Option<f64>,
    pub variance_kernel: KernelRecord,
    pub add_residual_mean: bool,
    pub neighbors: Option<usize>,
    /// Training inputs and targets on the modelling scale, row-major.
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub standardization: Option<Standardization>,
}

/// Any fitted model that can make predictions.
#[derive(Debug, Clone)]
pub enum FittedModel<T: Scalar> {
    ExactGp(GpModel<T>),
    TwoStageExact(TwoStageModel<T>),
    TwoStageScalable(ScalableModel<T>),
    Gpnn(GpnnModel<T>),
}

impl<T: Scalar> FittedModel<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::ExactGp(_) => ModelKind::ExactGp,
            FittedModel::TwoStageExact(_) => ModelKind::TwoStageExact,
            FittedModel::TwoStageScalable(_) => ModelKind::TwoStageScalable,
            FittedModel::Gpnn(_) => ModelKind::Gpnn,
        }
    }

    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<PosteriorPrediction<T>> {
        match self {
            FittedModel::ExactGp(m) => m.predict(x_star),
            FittedModel::TwoStageExact(m) => m.predict(x_star),
            FittedModel::TwoStageScalable(m) => m.predict(x_star),
            FittedModel::Gpnn(m) => m.predict(x_star),
        }
    }

    pub fn to_artifact(&self, standardization: Option<Standardization>) -> ModelArtifact {
        let (x, y) = match self {
            FittedModel::ExactGp(m) => (m.x_train(), m.y_train()),
            FittedModel::TwoStageExact(m) => (m.mean_model().x_train(), m.var_model().y_train()),
            FittedModel::TwoStageScalable(m) => (m.x_train(), m.y_train()),
            FittedModel::Gpnn(m) => (m.x_train(), m.y_train()),
        };
        // Two-stage exact stores the original targets, not the demeaned ones.
        let y: DVector<T> = match self {
            FittedModel::TwoStageExact(m) => y + m.mean_model().predict(x).expect("training inputs are valid"),
            _ => y.clone(),
        };
        let (mean_kernel, ridge, variance_kernel, add, neighbors) = match self {
            FittedModel::ExactGp(m) => (None, None, KernelRecord::from_spec(m.spec()), false, None),
            FittedModel::TwoStageExact(m) => (
                Some(KernelRecord::from_spec(m.mean_model().spec())),
                Some(to_f64(m.mean_model().lambda())),
                KernelRecord::from_spec(m.var_model().spec()),
                m.add_residual_mean(),
                None,
            ),
            FittedModel::TwoStageScalable(m) => (
                Some(KernelRecord::from_spec(m.mean_spec())),
                Some(to_f64(m.lambda())),
                KernelRecord::from_spec(m.var_spec()),
                m.add_residual_mean(),
                Some(m.w()),
            ),
            FittedModel::Gpnn(m) => (None, None, KernelRecord::from_spec(m.spec()), false, Some(m.w())),
        };
        ModelArtifact {
            version: ARTIFACT_VERSION,
            kind: self.kind(),
            mean_kernel,
            ridge,
            variance_kernel,
            add_residual_mean: add,
            neighbors,
            x_train: (0..x.nrows()).map(|i| x.row(i).iter().map(|v| to_f64(*v)).collect()).collect(),
            y_train: y.iter().map(|v| to_f64(*v)).collect(),
            standardization,
        }
    }

    pub fn from_artifact(a: &ModelArtifact) -> Result<Self> {
        if a.version != ARTIFACT_VERSION {
            return Err(GpError::input(format!(
                "artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        let n = a.x_train.len();
        let d = a.x_train.first().map_or(0, |r| r.len());
        if n == 0 || d == 0 || a.x_train.iter().any(|r| r.len() != d) || a.y_train.len() != n {
            return Err(GpError::input("artifact training data is empty or ragged"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| lit::<T>(a.x_train[i][j]));
        let y = DVector::from_fn(n, |i, _| lit::<T>(a.y_train[i]));
        let var_spec = a.variance_kernel.to_spec::<T>()?;
        let need = |v: Option<KernelRecord>, what: &str| v.ok_or_else(|| GpError::input(format!("artifact lacks {what}")));
        let ridge = || a.ridge.map(lit::<T>).ok_or_else(|| GpError::input("artifact lacks the ridge"));
        let w = || a.neighbors.ok_or_else(|| GpError::input("artifact lacks the neighbour count"));
        Ok(match a.kind {
            ModelKind::ExactGp => FittedModel::ExactGp(fit_posterior(&var_spec, &x, &y, None)?),
            ModelKind::TwoStageExact => FittedModel::TwoStageExact(TwoStageModel::from_parts(
                &x,
                &y,
                &need(a.mean_kernel, "the mean kernel")?.to_spec()?,
                ridge()?,
                &var_spec,
                a.add_residual_mean,
            )?),
            ModelKind::TwoStageScalable => FittedModel::TwoStageScalable(ScalableModel::from_parts(
                &x,
                &y,
                &need(a.mean_kernel, "the mean kernel")?.to_spec()?,
                ridge()?,
                &var_spec,
                w()?,
                a.add_residual_mean,
            )?),
            ModelKind::Gpnn => FittedModel::Gpnn(GpnnModel::new(&x, &y, &var_spec, w()?)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardization_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-5.0..20.0));
        x.column_mut(2).fill(4.0);
        let y = DVector::from_fn(50, |_, _| rng.random_range(0.0..3.0));
        let s = Standardization::fit(&x, &y);
        let z = s.apply_x(&x).unwrap();
        for j in 0..2 {
            let (m, sd) = mean_std(z.column(j).iter().copied());
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-6);
        }
        assert_eq!(s.x_std[2], 1.0);
        assert!(z.column(2).iter().all(|v| *v == 0.0));
        let back = s.invert_y(&s.apply_y(&y));
        assert!((back - y).amax() < 1e-12);
    }

    #[test]
    fn artifact_round_trip_reproduces_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: DMatrix<f64> = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(25, |i, _| x[(i, 0)] - x[(i, 1)].powi(2));
        let q = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let ms = KernelSpec::with_constrained(KernelFamily::Rbf, 0.9, 1.0, 0.1).unwrap();
        let vs = KernelSpec::with_constrained(KernelFamily::Matern12, 0.6, 0.4, 0.2).unwrap();
        let models = vec![
            FittedModel::ExactGp(fit_posterior(&vs, &x, &y, None).unwrap()),
            FittedModel::TwoStageExact(TwoStageModel::from_parts(&x, &y, &ms, 0.01, &vs, true).unwrap()),
            FittedModel::TwoStageScalable(ScalableModel::from_parts(&x, &y, &ms, 0.01, &vs, 10, false).unwrap()),
            FittedModel::Gpnn(GpnnModel::new(&x, &y, &vs, 10).unwrap()),
        ];
        for m in models {
            let art = m.to_artifact(Some(Standardization::identity(2)));
            let json = serde_json::to_string(&art).unwrap();
            let back: ModelArtifact = serde_json::from_str(&json).unwrap();
            assert_eq!(back, art);
            let rebuilt = FittedModel::<f64>::from_artifact(&back).unwrap();
            let (a, b) = (m.predict(&q).unwrap(), rebuilt.predict(&q).unwrap());
            assert!((a.mean - b.mean).amax() < 1e-10, "{:?}", m.kind());
            assert!((a.variance - b.variance).amax() < 1e-10);
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let vs = KernelSpec::<f64>::default_for(KernelFamily::Rbf);
        let mut art = FittedModel::ExactGp(fit_posterior(&vs, &x, &y, None).unwrap()).to_artifact(None);
        art.version = 99;
        assert!(FittedModel::<f64>::from_artifact(&art).is_err());
    }
}
