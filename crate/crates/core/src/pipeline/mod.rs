//! End-to-end models.
//!
//! The two-stage model fits a KRR mean first, subtracts it from the targets
//! and then fits a zero-mean GP on the residuals for the predictive variance.

mod artifact;
mod dirichlet;
mod scalable;

pub use artifact::{FittedModel, KernelRecord, ModelArtifact, ModelKind, Standardization, ARTIFACT_VERSION};
pub use dirichlet::{dirichlet_transform, DirichletClassifier, DirichletTargets};
pub use scalable::{
    calibration_factor, fit_gpnn, fit_two_stage_scalable, gpnn_calibrate, nearest_neighbors, GpnnModel, NeighborIndex,
    ScalableConfig, ScalableModel,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::gp::{fit_posterior, GpModel, PosteriorPrediction};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::krr::{fit_krr, krr_cross_validate, KrrModel, DEFAULT_LAMBDA_GRID};
use crate::scalar::{count, lit, to_f64, Scalar};
use crate::selection::{aks, AksResult, MisspecConfig};
use crate::training::{train_gp, warm_start_train, TrainConfig, WarmStartConfig};

/// How the stage-one ridge is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RidgeMode {
    /// Grid search by k-fold cross-validation.
    #[default]
    CrossValidation,
    /// `λ = 0.01 n`.
    Fixed,
}

/// How the stage-one kernel family is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanKernelSelection {
    /// Jointly with the ridge by cross-validation.
    #[default]
    CrossValidation,
    /// Kernel search on the raw targets.
    Aks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub mean_dictionary: Vec<KernelFamily>,
    pub mean_kernel_selection: MeanKernelSelection,
    pub ridge: RidgeMode,
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub variance_dictionary: Vec<KernelFamily>,
    /// Skips the variance kernel search when set.
    pub variance_kernel: Option<KernelFamily>,
    /// Adds the stage-two posterior mean of the residuals to the KRR mean.
    pub add_residual_mean: bool,
    pub misspec: MisspecConfig,
    pub trainer: TrainConfig,
    pub warm_start: WarmStartConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            mean_dictionary: vec![KernelFamily::Rbf, KernelFamily::Matern12],
            mean_kernel_selection: MeanKernelSelection::CrossValidation,
            ridge: RidgeMode::CrossValidation,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            cv_folds: 5,
            variance_dictionary: KernelFamily::ALL.to_vec(),
            variance_kernel: None,
            add_residual_mean: true,
            misspec: MisspecConfig::default(),
            trainer: TrainConfig::default(),
            warm_start: WarmStartConfig::twostage_table5(),
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mean_dictionary.is_empty() {
            return Err(GpError::input("stage-one kernel dictionary is empty"));
        }
        if self.variance_kernel.is_none() && self.variance_dictionary.is_empty() {
            return Err(GpError::input("stage-two kernel dictionary is empty"));
        }
        if self.ridge == RidgeMode::CrossValidation && self.lambda_grid.is_empty() {
            return Err(GpError::input("ridge grid is empty"));
        }
        self.misspec.validate()?;
        self.trainer.validate()?;
        self.warm_start.validate()
    }
}

/// What the fitting procedure decided, kept for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mean_family: KernelFamily,
    /// Constrained (lengthscale, outputscale) of the stage-one kernel.
    pub mean_hyperparameters: [f64; 2],
    pub lambda: f64,
    pub variance_family: KernelFamily,
    /// Constrained (lengthscale, outputscale, noise) of the stage-two kernel.
    pub variance_hyperparameters: [f64; 3],
    pub mean_search: Option<AksResult>,
    pub variance_search: Option<AksResult>,
}

/// Trains a zero-mean GP from the default hyperparameters, with the warm-start
/// recipe when the data exceed the subsample size.
pub(crate) fn train_zero_mean<T: Scalar>(
    family: KernelFamily,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ws: &WarmStartConfig,
    trainer: &TrainConfig,
) -> Result<KernelSpec<T>> {
    let init = KernelSpec::default_for(family);
    let ws = WarmStartConfig { subsample_size: ws.subsample_size.min(x.nrows()), ..ws.clone() };
    Ok(warm_start_train(&init, x, y, &ws, trainer)?.0)
}

/// Result of stage one: the kernel (with trained lengthscale and outputscale)
/// and ridge to use for KRR.
pub(crate) struct StageOneChoice<T: Scalar> {
    pub spec: KernelSpec<T>,
    pub lambda: T,
    pub search: Option<AksResult>,
}

pub(crate) fn choose_stage_one<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    cfg: &TwoStageConfig,
    train: impl Fn(KernelFamily) -> Result<KernelSpec<T>>,
) -> Result<StageOneChoice<T>> {
    let (families, search) = match cfg.mean_kernel_selection {
        MeanKernelSelection::CrossValidation => (cfg.mean_dictionary.clone(), None),
        MeanKernelSelection::Aks => {
            let res = aks(x, y, &cfg.mean_dictionary, &cfg.misspec, &cfg.trainer)?;
            (vec![res.selected], Some(res))
        }
    };
    let candidates = families.iter().map(|&f| train(f)).collect::<Result<Vec<_>>>()?;
    let lambdas: Vec<T> = match cfg.ridge {
        RidgeMode::CrossValidation => cfg.lambda_grid.iter().map(|&l| lit(l)).collect(),
        RidgeMode::Fixed => vec![lit::<T>(0.01) * count::<T>(x.nrows())],
    };
    let (spec, lambda) = if candidates.len() == 1 && lambdas.len() == 1 {
        (candidates[0], lambdas[0])
    } else {
        let sel = krr_cross_validate(x, y, &lambdas, &candidates, cfg.cv_folds)?;
        (candidates[sel.candidate], sel.lambda)
    };
    Ok(StageOneChoice { spec, lambda, search })
}

pub(crate) fn choose_variance_family<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    cfg: &TwoStageConfig,
) -> Result<(KernelFamily, Option<AksResult>)> {
    match cfg.variance_kernel {
        Some(f) => Ok((f, None)),
        None => {
            let res = aks(x, y, &cfg.variance_dictionary, &cfg.misspec, &cfg.trainer)?;
            Ok((res.selected, Some(res)))
        }
    }
}

pub(crate) fn provenance<T: Scalar>(
    mean: &KernelSpec<T>,
    lambda: T,
    var: &KernelSpec<T>,
    mean_search: Option<AksResult>,
    variance_search: Option<AksResult>,
) -> Provenance {
    let v = var.params.constrained();
    Provenance {
        mean_family: mean.family,
        mean_hyperparameters: [to_f64(mean.lengthscale()), to_f64(mean.outputscale())],
        lambda: to_f64(lambda),
        variance_family: var.family,
        variance_hyperparameters: [to_f64(v[0]), to_f64(v[1]), to_f64(v[2])],
        mean_search,
        variance_search,
    }
}

/// KRR mean plus a zero-mean GP on the demeaned targets.
#[derive(Debug, Clone)]
pub struct TwoStageModel<T: Scalar> {
    mean_model: KrrModel<T>,
    var_model: GpModel<T>,
    add_residual_mean: bool,
    provenance: Provenance,
}

impl<T: Scalar> TwoStageModel<T> {
    /// Builds the model from fixed kernels, without any search or training.
    pub fn from_parts(
        x: &DMatrix<T>,
        y: &DVector<T>,
        mean_spec: &KernelSpec<T>,
        lambda: T,
        var_spec: &KernelSpec<T>,
        add_residual_mean: bool,
    ) -> Result<Self> {
        let mean_model = fit_krr(mean_spec, x, y, lambda).map_err(|e| e.in_stage("stage one"))?;
        let demeaned = y - mean_model.predict(x)?;
        let var_model = fit_posterior(var_spec, x, &demeaned, None).map_err(|e| e.in_stage("stage two"))?;
        Ok(TwoStageModel {
            mean_model,
            var_model,
            add_residual_mean,
            provenance: provenance(mean_spec, lambda, var_spec, None, None),
        })
    }

    pub fn mean_model(&self) -> &KrrModel<T> {
        &self.mean_model
    }

    pub fn var_model(&self) -> &GpModel<T> {
        &self.var_model
    }

    pub fn add_residual_mean(&self) -> bool {
        self.add_residual_mean
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn predict(&self, x_star: &DMatrix<T>) -> Result<PosteriorPrediction<T>> {
        let m1 = self.mean_model.predict(x_star)?;
        let mut p = self.var_model.predict(x_star)?;
        p.mean = if self.add_residual_mean { m1 + p.mean } else { m1 };
        Ok(p)
    }
}

/// Full two-stage fit: stage-one kernel and ridge, KRR, demeaning, stage-two
/// kernel search, warm-start training and the final zero-mean GP.
pub fn fit_two_stage_exact<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>, cfg: &TwoStageConfig) -> Result<TwoStageModel<T>> {
    cfg.validate()?;
    let s1 = choose_stage_one(x, y, cfg, |f| train_zero_mean(f, x, y, &cfg.warm_start, &cfg.trainer))
        .map_err(|e| e.in_stage("stage one"))?;
    let mean_model = fit_krr(&s1.spec, x, y, s1.lambda).map_err(|e| e.in_stage("stage one"))?;
    let demeaned = y - mean_model.predict(x)?;

    let (var_family, var_search) = choose_variance_family(x, &demeaned, cfg).map_err(|e| e.in_stage("stage two"))?;
    let var_spec = train_zero_mean(var_family, x, &demeaned, &cfg.warm_start, &cfg.trainer)
        .map_err(|e| e.in_stage("stage two"))?;
    let var_model = fit_posterior(&var_spec, x, &demeaned, None).map_err(|e| e.in_stage("stage two"))?;
    Ok(TwoStageModel {
        mean_model,
        var_model,
        add_residual_mean: cfg.add_residual_mean,
        provenance: provenance(&s1.spec, s1.lambda, &var_spec, s1.search, var_search),
    })
}

/// Zero-mean GP baseline: trains `family` from the default hyperparameters on
/// all data and conditions on it.
pub fn fit_exact_gp<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    family: KernelFamily,
    trainer: &TrainConfig,
) -> Result<GpModel<T>> {
    let (spec, _) = train_gp(&KernelSpec::default_for(family), x, y, trainer)?;
    fit_posterior(&spec, x, y, None)
}

/// Kernel search over `dictionary`, then [`fit_exact_gp`] with the winner.
pub fn fit_aks_exact_gp<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    dictionary: &[KernelFamily],
    misspec: &MisspecConfig,
    trainer: &TrainConfig,
) -> Result<(GpModel<T>, AksResult)> {
    let res = aks(x, y, dictionary, misspec, trainer)?;
    Ok((fit_exact_gp(x, y, res.selected, trainer)?, res))
}
