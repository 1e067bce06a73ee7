//! Experiment configuration, read from JSON. Unknown keys are rejected at
//! every level so that a misspelt option fails loudly instead of silently
//! falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twostage_gp::metrics::MetricsConfig;
use twostage_gp::pipeline::{MeanKernelSelection, RidgeMode};
use twostage_gp::{GpError, KernelFamily, MisspecConfig, Result, ScalableConfig, TrainConfig, TwoStageConfig, WarmStartConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Zero-mean GP with a fixed kernel.
    ExactGp,
    /// Zero-mean GP with the kernel picked by kernel search.
    AksExactGp,
    TwoStageExact,
    /// Nearest-neighbour GP with calibrated variances.
    Gpnn,
    TwoStageGpnn,
}

impl Method {
    pub fn is_scalable(self) -> bool {
        matches!(self, Method::Gpnn | Method::TwoStageGpnn)
    }
}

/// Test NLL under independent per-point predictives or the joint predictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    #[default]
    Pointwise,
    Joint,
}

/// Scale on which NLL is reported. RMSE is always in original units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NllScale {
    #[default]
    Standardized,
    Original,
}

/// Two-stage options other than the shared training, warm-start and kernel
/// search settings, which come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageOptions {
    pub mean_dictionary: Vec<KernelFamily>,
    pub mean_kernel_selection: MeanKernelSelection,
    pub ridge: RidgeMode,
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub variance_dictionary: Vec<KernelFamily>,
    pub variance_kernel: Option<KernelFamily>,
    pub add_residual_mean: bool,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        let d = TwoStageConfig::default();
        TwoStageOptions {
            mean_dictionary: d.mean_dictionary,
            mean_kernel_selection: d.mean_kernel_selection,
            ridge: d.ridge,
            lambda_grid: d.lambda_grid,
            cv_folds: d.cv_folds,
            variance_dictionary: d.variance_dictionary,
            variance_kernel: d.variance_kernel,
            add_residual_mean: d.add_residual_mean,
        }
    }
}

fn default_folds() -> usize {
    20
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV files, one benchmark run each.
    pub datasets: Vec<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    pub method: Method,
    /// Kernel for `exact-gp` and `gpnn`.
    #[serde(default)]
    pub kernel: Option<KernelFamily>,
    /// Candidate kernels for `aks-exact-gp`.
    #[serde(default)]
    pub dictionary: Option<Vec<KernelFamily>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub warm_start: WarmStartConfig,
    #[serde(default)]
    pub misspec: MisspecConfig,
    #[serde(default)]
    pub two_stage: TwoStageOptions,
    /// Required by the nearest-neighbour methods.
    #[serde(default)]
    pub scalable: Option<ScalableConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub nll_mode: NllMode,
    #[serde(default)]
    pub nll_scale: NllScale,
}

impl ExperimentConfig {
    /// A config with every optional section at its default.
    pub fn new(datasets: Vec<PathBuf>, method: Method) -> Self {
        ExperimentConfig {
            datasets,
            has_header: false,
            method,
            kernel: None,
            dictionary: None,
            train: TrainConfig::default(),
            warm_start: WarmStartConfig::default(),
            misspec: MisspecConfig::default(),
            two_stage: TwoStageOptions::default(),
            scalable: None,
            metrics: MetricsConfig::default(),
            n_folds: default_folds(),
            train_fraction: default_train_fraction(),
            seed: 0,
            output: default_output(),
            nll_mode: NllMode::default(),
            nll_scale: NllScale::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| GpError::input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GpError::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(GpError::input(format!("method {:?} requires {what}", self.method)))
            }
        };
        match self.method {
            Method::ExactGp => need(self.kernel.is_some(), "\"kernel\"")?,
            Method::AksExactGp => need(self.dictionary.as_ref().is_some_and(|d| !d.is_empty()), "a non-empty \"dictionary\"")?,
            Method::TwoStageExact => {}
            Method::Gpnn => {
                need(self.kernel.is_some(), "\"kernel\"")?;
                need(self.scalable.is_some(), "a \"scalable\" section")?;
            }
            Method::TwoStageGpnn => need(self.scalable.is_some(), "a \"scalable\" section")?,
        }
        if self.method.is_scalable() && self.nll_mode == NllMode::Joint {
            return Err(GpError::input("joint NLL is only available for the exact methods"));
        }
        if self.n_folds == 0 {
            return Err(GpError::input("n_folds must be positive"));
        }
        self.train.validate()?;
        self.warm_start.validate()?;
        self.misspec.validate()?;
        self.metrics.validate()?;
        self.two_stage_config(self.seed).validate()
    }

    /// Library two-stage config with trainer and search seeds set to `seed`.
    pub fn two_stage_config(&self, seed: u64) -> TwoStageConfig {
        let o = &self.two_stage;
        TwoStageConfig {
            mean_dictionary: o.mean_dictionary.clone(),
            mean_kernel_selection: o.mean_kernel_selection,
            ridge: o.ridge,
            lambda_grid: o.lambda_grid.clone(),
            cv_folds: o.cv_folds,
            variance_dictionary: o.variance_dictionary.clone(),
            variance_kernel: o.variance_kernel,
            add_residual_mean: o.add_residual_mean,
            misspec: self.misspec_config(seed),
            trainer: self.train_config(seed),
            warm_start: self.warm_start.clone(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn misspec_config(&self, seed: u64) -> MisspecConfig {
        MisspecConfig { seed, ..self.misspec.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_json(r#"{"datasets": ["a.csv"], "method": "two-stage-exact"}"#).unwrap();
        assert_eq!(cfg.n_folds, 20);
        assert_eq!(cfg.nll_scale, NllScale::Standardized);
        assert_eq!(cfg.two_stage_config(7).trainer.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"datasets": [], "method": "exact-gp", "kernel": "rbf", "foldz": 3}"#,
            r#"{"datasets": [], "method": "exact-gp", "kernel": "rbf", "train": {"iters": 3}}"#,
            r#"{"datasets": [], "method": "two-stage-exact", "two_stage": {"ridge_mode": "fixed"}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}");
        }
    }

    #[test]
    fn method_requirements() {
        assert!(ExperimentConfig::from_json(r#"{"datasets": [], "method": "exact-gp"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"datasets": [], "method": "gpnn", "kernel": "rbf"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"datasets": [], "method": "aks-exact-gp", "dictionary": []}"#).is_err());
        let ok = r#"{"datasets": [], "method": "gpnn", "kernel": "matern32", "scalable": {"w": 10}}"#;
        assert_eq!(ExperimentConfig::from_json(ok).unwrap().scalable.unwrap().w, 10);
        let joint = r#"{"datasets": [], "method": "two-stage-gpnn", "scalable": {}, "nll_mode": "joint"}"#;
        assert!(ExperimentConfig::from_json(joint).is_err());
    }
}
