//! Hyperparameter training: AdamW on the raw parameters, a cosine schedule
//! with hard restarts and linear warmup, subsampling warm start, and NLL
//! grids for contour plots.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::gp::NllObjective;
use crate::kernels::{select_entries, select_rows, Hyperparameters, KernelSpec, Param};
use crate::sampling::random_subsample;
use crate::scalar::{lit, to_f64, Scalar};

/// Training aborts when the NLL rises this far above its starting value.
const DIVERGENCE_MARGIN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    CosineHardRestarts,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerKind,
    pub num_cycles: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100,
            learning_rate: 0.1,
            optimizer: Optimizer::AdamW,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.01,
            scheduler: SchedulerKind::CosineHardRestarts,
            num_cycles: 3,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted and leaves the parameters unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(GpError::input("training needs at least one iteration"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(GpError::input(format!("invalid learning rate {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(GpError::input("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(GpError::input("epsilon must be positive and weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(GpError::input("warmup fraction must lie in [0, 1)"));
        }
        if self.scheduler == SchedulerKind::CosineHardRestarts && self.num_cycles == 0 {
            return Err(GpError::input("cosine schedule needs at least one cycle"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.iterations as f64).floor() as usize
    }

    /// Learning-rate multiplier applied at step `step` (0-based).
    pub fn lr_multiplier(&self, step: usize) -> f64 {
        match self.scheduler {
            SchedulerKind::Constant => 1.0,
            SchedulerKind::CosineHardRestarts => {
                let warmup = self.warmup_steps();
                if step < warmup {
                    return step as f64 / warmup.max(1) as f64;
                }
                let progress = (step - warmup) as f64 / (self.iterations - warmup).max(1) as f64;
                if progress >= 1.0 {
                    return 0.0;
                }
                let phase = (self.num_cycles as f64 * progress) % 1.0;
                (0.5 * (1.0 + (std::f64::consts::PI * phase).cos())).max(0.0)
            }
        }
    }

    /// Learning rate at every step.
    pub fn schedule(&self) -> Vec<f64> {
        (0..self.iterations).map(|s| self.learning_rate * self.lr_multiplier(s)).collect()
    }

    fn with_steps(&self, iterations: usize, learning_rate: f64) -> Self {
        TrainConfig { iterations, learning_rate, ..self.clone() }
    }
}

/// Decoupled-weight-decay Adam with the bias-corrected update.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar, const N: usize> {
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    m: [T; N],
    v: [T; N],
    t: i32,
}

impl<T: Scalar, const N: usize> AdamW<T, N> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: lit(cfg.betas.0),
            beta2: lit(cfg.betas.1),
            eps: lit(cfg.epsilon),
            weight_decay: lit(cfg.weight_decay),
            m: [T::zero(); N],
            v: [T::zero(); N],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T; N], grad: &[T; N], lr: T) {
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for i in 0..N {
            params[i] *= one - lr * self.weight_decay;
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * grad[i] * grad[i];
            let denom = (self.v[i] / bc2).sqrt() + self.eps;
            params[i] -= lr / bc1 * self.m[i] / denom;
        }
    }
}

/// One optimizer step as seen before the update is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<T> {
    pub nll: T,
    /// Constrained (lengthscale, outputscale, noise).
    pub hyperparameters: [T; 3],
    pub grad_norm: T,
    pub learning_rate: T,
    /// Size of the data the NLL was evaluated on.
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace<T> {
    pub entries: Vec<TraceEntry<T>>,
}

impl<T: Scalar> TrainTrace<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nll_values(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.nll).collect()
    }

    /// Number of steps whose NLL was evaluated on exactly `n` points.
    pub fn factorizations_of_size(&self, n: usize) -> usize {
        self.entries.iter().filter(|e| e.n_points == n).count()
    }
}

/// Minimizes the scaled NLL of a zero-mean GP by `cfg.iterations` AdamW steps
/// on the raw hyperparameters.
pub fn train_gp<T: Scalar>(
    spec_init: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    cfg: &TrainConfig,
) -> Result<(KernelSpec<T>, TrainTrace<T>)> {
    cfg.validate()?;
    let objective = NllObjective::new(x, y, None)?;
    run_training(spec_init, &objective, cfg, 0)
}

fn run_training<T: Scalar>(
    spec_init: &KernelSpec<T>,
    objective: &NllObjective<T>,
    cfg: &TrainConfig,
    iteration_offset: usize,
) -> Result<(KernelSpec<T>, TrainTrace<T>)> {
    let mut raw = spec_init.params.raw();
    let mut opt = AdamW::<T, 3>::new(cfg);
    let mut trace = TrainTrace { entries: Vec::with_capacity(cfg.iterations) };
    let mut initial: Option<f64> = None;
    for step in 0..cfg.iterations {
        let iteration = iteration_offset + step;
        let spec = KernelSpec::new(spec_init.family, Hyperparameters::from_raw(raw));
        let (value, grad) = objective
            .value_and_gradient(&spec)
            .map_err(|e| GpError::Training { iteration, message: e.to_string() })?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GpError::Training {
                iteration,
                message: format!("non-finite objective {value} or gradient {grad:?}"),
            });
        }
        let v = to_f64(value);
        let start = *initial.get_or_insert(v);
        if v > start + DIVERGENCE_MARGIN {
            return Err(GpError::Training {
                iteration,
                message: format!("diverged: nll {v:.4e} against initial {start:.4e}"),
            });
        }
        let lr: T = lit(cfg.learning_rate * cfg.lr_multiplier(step));
        trace.entries.push(TraceEntry {
            nll: value,
            hyperparameters: spec.params.constrained(),
            grad_norm: grad.iter().fold(T::zero(), |a, g| a + *g * *g).sqrt(),
            learning_rate: lr,
            n_points: objective.n(),
        });
        opt.step(&mut raw, &grad, lr);
    }
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(GpError::Training {
            iteration: iteration_offset + cfg.iterations,
            message: format!("parameters left the finite range: {raw:?}"),
        });
    }
    Ok((KernelSpec::new(spec_init.family, Hyperparameters::from_raw(raw)), trace))
}

/// Two-phase recipe: train on a random subsample, then a few steps on all data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub subsample_size: usize,
    pub sub_iterations: usize,
    pub sub_lr: f64,
    pub full_iterations: usize,
    pub full_lr: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self::sod_table4()
    }
}

impl WarmStartConfig {
    /// 200 random points for 50 steps at 0.1, then 5 full-data steps at 0.02.
    pub fn sod_table4() -> Self {
        WarmStartConfig { subsample_size: 200, sub_iterations: 50, sub_lr: 0.1, full_iterations: 5, full_lr: 0.02 }
    }

    /// 200 random points for 100 steps at 0.1, then 10 full-data steps at 0.1.
    pub fn twostage_table5() -> Self {
        WarmStartConfig { subsample_size: 200, sub_iterations: 100, sub_lr: 0.1, full_iterations: 10, full_lr: 0.1 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sod-table4" => Ok(Self::sod_table4()),
            "twostage-table5" => Ok(Self::twostage_table5()),
            other => Err(GpError::input(format!("unknown warm-start preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample_size < 2 {
            return Err(GpError::input("warm-start subsample needs at least 2 points"));
        }
        if self.sub_iterations == 0 || self.full_iterations == 0 {
            return Err(GpError::input("warm-start phases need at least one iteration each"));
        }
        if !(self.sub_lr >= 0.0 && self.full_lr >= 0.0) {
            return Err(GpError::input("warm-start learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Trains on a uniformly random subsample of `min(subsample_size, n)` points,
/// then continues on the full data with a fresh optimizer and schedule.
///
/// The subsample is drawn with `cfg.seed` and kept in ascending index order,
/// so a subsample covering all points reproduces plain sequential training.
pub fn warm_start_train<T: Scalar>(
    spec_init: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ws: &WarmStartConfig,
    cfg: &TrainConfig,
) -> Result<(KernelSpec<T>, TrainTrace<T>)> {
    ws.validate()?;
    let n = x.nrows();
    if ws.subsample_size > n {
        return Err(GpError::input(format!("warm-start subsample {} exceeds {n} points", ws.subsample_size)));
    }
    let (spec_sub, mut trace) = subsample_train(spec_init, x, y, ws, cfg)?;
    let full_cfg = cfg.with_steps(ws.full_iterations, ws.full_lr);
    full_cfg.validate()?;
    let objective = NllObjective::new(x, y, None)?;
    let (spec, full_trace) = run_training(&spec_sub, &objective, &full_cfg, ws.sub_iterations)?;
    trace.entries.extend(full_trace.entries);
    Ok((spec, trace))
}

/// The first phase of [`warm_start_train`] on its own.
pub fn subsample_train<T: Scalar>(
    spec_init: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ws: &WarmStartConfig,
    cfg: &TrainConfig,
) -> Result<(KernelSpec<T>, TrainTrace<T>)> {
    let n = x.nrows();
    let m = ws.subsample_size.min(n);
    let mut idx = random_subsample(n, m, cfg.seed)?;
    idx.sort_unstable();
    let xs = select_rows(x, &idx);
    let ys = select_entries(y, &idx);
    let sub_cfg = cfg.with_steps(ws.sub_iterations, ws.sub_lr);
    sub_cfg.validate()?;
    let objective = NllObjective::new(&xs, &ys, None)?;
    run_training(spec_init, &objective, &sub_cfg, 0)
}

/// NLL values on a grid over two constrained hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrid<T: Scalar> {
    pub axes: (Param, Param),
    pub first: Vec<T>,
    pub second: Vec<T>,
    /// `values[(i, j)]` is the NLL at `(first[i], second[j])`.
    pub values: DMatrix<T>,
}

impl<T: Scalar> NllGrid<T> {
    /// Grid coordinates of the smallest value (first-found on ties).
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for i in 0..self.values.nrows() {
            for j in 0..self.values.ncols() {
                if self.values[(i, j)] < self.values[best] {
                    best = (i, j);
                }
            }
        }
        best
    }
}

/// Evaluates the NLL over `first × second` for the given parameter pair,
/// holding the third parameter at its value in `spec`. No optimization.
pub fn nll_contour<T: Scalar>(
    spec: &KernelSpec<T>,
    x: &DMatrix<T>,
    y: &DVector<T>,
    axes: (Param, Param),
    first: &[T],
    second: &[T],
) -> Result<NllGrid<T>> {
    if axes.0 == axes.1 {
        return Err(GpError::input("contour axes must be two different parameters"));
    }
    if first.is_empty() || second.is_empty() {
        return Err(GpError::input("contour grid must be non-empty"));
    }
    let objective = NllObjective::new(x, y, None)?;
    let mut values = DMatrix::zeros(first.len(), second.len());
    for (i, &a) in first.iter().enumerate() {
        for (j, &b) in second.iter().enumerate() {
            let params = spec.params.with(axes.0, a).with(axes.1, b);
            values[(i, j)] = objective.value(&KernelSpec::new(spec.family, params))?;
        }
    }
    Ok(NllGrid { axes, first: first.to_vec(), second: second.to_vec(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{nll, sample_prior};
    use crate::kernels::KernelFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let truth = KernelSpec::with_constrained(KernelFamily::Rbf, 1.0, 1.0, 0.3).unwrap();
        let y = sample_prior(&truth, &x, &mut rng).unwrap();
        (x, y)
    }

    #[test]
    fn schedule_warmup_then_restarts() {
        let cfg = TrainConfig { iterations: 100, ..Default::default() };
        let s = cfg.schedule();
        assert_eq!(cfg.warmup_steps(), 10);
        assert_eq!(s[0], 0.0);
        assert!((s[5] - 0.05).abs() < 1e-15);
        assert!((s[10] - 0.1).abs() < 1e-15);
        // cycles of 30 steps after warmup: restarts at 40 and 70
        for (a, b) in [(10, 40), (40, 70), (70, 100)] {
            for t in a + 1..b {
                assert!(s[t] <= s[t - 1], "step {t}");
            }
        }
        assert!((s[40] - 0.1).abs() < 1e-12 && s[39] < 0.01);
        assert!((s[70] - 0.1).abs() < 1e-12 && s[69] < 0.01);
    }

    #[test]
    fn constant_schedule() {
        let cfg = TrainConfig { iterations: 4, scheduler: SchedulerKind::Constant, ..Default::default() };
        assert_eq!(cfg.schedule(), vec![0.1; 4]);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let cfg = TrainConfig::default();
        let mut opt = AdamW::<f64, 1>::new(&cfg);
        let mut p = [1.0];
        opt.step(&mut p, &[0.5], 0.1);
        // decay: 1 - 0.1*0.01; bias-corrected step: m̂/sqrt(v̂) = 1
        let expected = 1.0 * (1.0 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let s = KernelSpec::<f64>::default_for(KernelFamily::Rbf);
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        assert!(train_gp(&s, &x, &y, &cfg).is_err());
        let cfg = TrainConfig { iterations: 1, learning_rate: 0.0, ..Default::default() };
        let (out, trace) = train_gp(&s, &x, &y, &cfg).unwrap();
        assert_eq!(out, s);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn training_lowers_nll_and_is_deterministic() {
        let (x, y) = synthetic(80, 4);
        let s = KernelSpec::<f64>::default_for(KernelFamily::Rbf);
        let cfg = TrainConfig::default();
        let (a, ta) = train_gp(&s, &x, &y, &cfg).unwrap();
        let (b, tb) = train_gp(&s, &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 100);
        let start = nll(&s, &x, &y, None).unwrap();
        let end = nll(&a, &x, &y, None).unwrap();
        assert!(end < start);
    }

    #[test]
    fn full_subsample_warm_start_equals_sequential_training() {
        let (x, y) = synthetic(40, 9);
        let s = KernelSpec::<f64>::default_for(KernelFamily::Matern32);
        let ws = WarmStartConfig { subsample_size: 40, sub_iterations: 20, sub_lr: 0.1, full_iterations: 5, full_lr: 0.02 };
        let cfg = TrainConfig::default();
        let (warm, trace) = warm_start_train(&s, &x, &y, &ws, &cfg).unwrap();
        let (mid, _) = train_gp(&s, &x, &y, &cfg.with_steps(20, 0.1)).unwrap();
        let (seq, _) = train_gp(&mid, &x, &y, &cfg.with_steps(5, 0.02)).unwrap();
        assert_eq!(warm, seq);
        assert_eq!(trace.len(), 25);
    }

    #[test]
    fn warm_start_counts_full_factorizations() {
        let (x, y) = synthetic(60, 2);
        let s = KernelSpec::<f64>::default_for(KernelFamily::Rbf);
        let ws = WarmStartConfig { subsample_size: 20, sub_iterations: 15, sub_lr: 0.1, full_iterations: 4, full_lr: 0.02 };
        let (_, trace) = warm_start_train(&s, &x, &y, &ws, &TrainConfig::default()).unwrap();
        assert_eq!(trace.factorizations_of_size(60), 4);
        assert_eq!(trace.factorizations_of_size(20), 15);
        let too_big = WarmStartConfig { subsample_size: 61, ..ws };
        assert!(warm_start_train(&s, &x, &y, &too_big, &TrainConfig::default()).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(WarmStartConfig::preset("sod-table4").unwrap().full_iterations, 5);
        let t5 = WarmStartConfig::preset("twostage-table5").unwrap();
        assert_eq!((t5.full_iterations, t5.full_lr), (10, 0.1));
        assert!(WarmStartConfig::preset("other").is_err());
    }

    #[test]
    fn point_contour_equals_nll() {
        let (x, y) = synthetic(30, 1);
        let s = KernelSpec::with_constrained(KernelFamily::Rbf, 0.9, 1.1, 0.4).unwrap();
        let g = nll_contour(&s, &x, &y, (Param::Lengthscale, Param::Noise), &[0.9], &[0.4]).unwrap();
        let direct = nll(&s, &x, &y, None).unwrap();
        assert!((g.values[(0, 0)] - direct).abs() < 1e-12);
        assert!(nll_contour(&s, &x, &y, (Param::Noise, Param::Noise), &[0.9], &[0.4]).is_err());
        assert!(nll_contour(&s, &x, &y, (Param::Lengthscale, Param::Noise), &[], &[0.4]).is_err());
    }
}
