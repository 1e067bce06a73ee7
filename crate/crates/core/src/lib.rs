//! Gaussian-process regression with a two-stage mean/variance split.
//!
//! Stage one fits a kernel ridge regression for the mean; stage two fits a
//! zero-mean GP on the demeaned targets for the uncertainty. Around that sit
//! an automatic kernel search driven by a misspecification test, subsampling
//! warm starts for hyperparameter training, nearest-neighbour variants for
//! large data and the usual regression UQ metrics.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common types.

pub mod error;
pub mod gp;
pub mod kernels;
pub mod krr;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod selection;
pub mod training;

pub use error::{GpError, Result};
pub use gp::{fit_posterior, nll, nll_gradient, GpModel, MeanMode, NllObjective, PosteriorPrediction};
pub use kernels::{Hyperparameters, KernelFamily, KernelSpec, Param};
pub use krr::{fit_krr, krr_cross_validate, KrrModel, KrrSelection};
pub use pipeline::{
    fit_two_stage_exact, fit_two_stage_scalable, FittedModel, ModelArtifact, ScalableConfig, ScalableModel,
    TwoStageConfig, TwoStageModel,
};
pub use sampling::{design_stats, fps, make_folds, random_subsample, DesignSample, FoldSplit};
pub use scalar::Scalar;
pub use selection::{aks, misspec_check, AksResult, MisspecConfig, MisspecReport, Verdict};
pub use training::{train_gp, warm_start_train, TrainConfig, TrainTrace, WarmStartConfig};

pub type KernelSpec64 = KernelSpec<f64>;
pub type KernelSpec32 = KernelSpec<f32>;
pub type GpModel64 = GpModel<f64>;
pub type GpModel32 = GpModel<f32>;
pub type TwoStageModel64 = TwoStageModel<f64>;
pub type TwoStageModel32 = TwoStageModel<f32>;
pub type ScalableModel64 = ScalableModel<f64>;
pub type PosteriorPrediction64 = PosteriorPrediction<f64>;
