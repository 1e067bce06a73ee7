//! Fitting each benchmark method on standardized data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use twostage_gp::metrics::joint_test_nll;
use twostage_gp::pipeline::{fit_aks_exact_gp, fit_exact_gp, fit_gpnn, KernelRecord};
use twostage_gp::{fit_two_stage_exact, fit_two_stage_scalable, FittedModel, GpError, KernelFamily, PosteriorPrediction, Result};

use crate::config::{ExperimentConfig, Method};

/// Kernels and ridge a fitted model ended up with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mean_kernel: Option<KernelRecord>,
    pub ridge: Option<f64>,
    pub variance_kernel: KernelRecord,
    /// Family chosen by kernel search, where one ran.
    pub selected_family: Option<KernelFamily>,
}

impl ModelSummary {
    pub fn of(model: &FittedModel<f64>) -> Self {
        let (mean_kernel, ridge, variance_kernel) = match model {
            FittedModel::ExactGp(m) => (None, None, KernelRecord::from_spec(m.spec())),
            FittedModel::TwoStageExact(m) => (
                Some(KernelRecord::from_spec(m.mean_model().spec())),
                Some(m.mean_model().lambda()),
                KernelRecord::from_spec(m.var_model().spec()),
            ),
            FittedModel::TwoStageScalable(m) => (
                Some(KernelRecord::from_spec(m.mean_spec())),
                Some(m.lambda()),
                KernelRecord::from_spec(m.var_spec()),
            ),
            FittedModel::Gpnn(m) => (None, None, KernelRecord::from_spec(m.spec())),
        };
        ModelSummary { mean_kernel, ridge, variance_kernel, selected_family: None }
    }
}

/// Fits `cfg.method` on `(x, y)`; every random choice is seeded with `seed`.
pub fn fit_method(cfg: &ExperimentConfig, x: &DMatrix<f64>, y: &DVector<f64>, seed: u64) -> Result<(FittedModel<f64>, ModelSummary)> {
    let trainer = cfg.train_config(seed);
    let kernel = || cfg.kernel.ok_or_else(|| GpError::input("config lacks \"kernel\""));
    let scalable = || cfg.scalable.clone().ok_or_else(|| GpError::input("config lacks a \"scalable\" section"));
    let (model, selected) = match cfg.method {
        Method::ExactGp => (FittedModel::ExactGp(fit_exact_gp(x, y, kernel()?, &trainer)?), None),
        Method::AksExactGp => {
            let dict = cfg.dictionary.clone().unwrap_or_default();
            let (m, res) = fit_aks_exact_gp(x, y, &dict, &cfg.misspec_config(seed), &trainer)?;
            (FittedModel::ExactGp(m), Some(res.selected))
        }
        Method::TwoStageExact => {
            let m = fit_two_stage_exact(x, y, &cfg.two_stage_config(seed))?;
            let fam = m.provenance().variance_search.as_ref().map(|r| r.selected);
            (FittedModel::TwoStageExact(m), fam)
        }
        Method::Gpnn => (FittedModel::Gpnn(fit_gpnn(x, y, &scalable()?, kernel()?, &trainer)?), None),
        Method::TwoStageGpnn => {
            let m = fit_two_stage_scalable(x, y, &scalable()?, &cfg.two_stage_config(seed))?;
            let fam = m.provenance().variance_search.as_ref().map(|r| r.selected);
            (FittedModel::TwoStageScalable(m), fam)
        }
    };
    let mut summary = ModelSummary::of(&model);
    summary.selected_family = selected;
    Ok((model, summary))
}

/// Test NLL under the joint predictive distribution. Only the exact models
/// have one; the covariance comes from the (stage-two) GP.
pub fn joint_nll(model: &FittedModel<f64>, prediction: &PosteriorPrediction<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let cov = match model {
        FittedModel::ExactGp(m) => m.predict_joint(x)?.1,
        FittedModel::TwoStageExact(m) => m.var_model().predict_joint(x)?.1,
        _ => return Err(GpError::input("joint NLL needs an exact model")),
    };
    joint_test_nll(&prediction.mean, &cov, y)
}
