//! Misspecification test and automatic kernel search.
//!
//! A trained zero-mean GP is accepted for a kernel family when, on held-out
//! points, the prediction error rarely exceeds 1.1 times the error of the
//! noise-only predictor `K_{*X}(K + σ²I)⁻¹ε̂_X − ε̂_*`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::gp::fit_posterior;
use crate::kernels::{cross_covariance, select_entries, select_rows, KernelFamily, KernelSpec};
use crate::sampling::fps;
use crate::scalar::{to_f64, Scalar};
use crate::training::{train_gp, TrainConfig};

/// Denominators below this count the point as passing.
const DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisspecConfig {
    pub rounds: usize,
    pub subsample_size: usize,
    /// Fraction of the subsample used for training in each round.
    pub split_fraction: f64,
    pub ratio_threshold: f64,
    pub delta: f64,
    /// Desired pass probability; kept for reporting only.
    pub p: f64,
    /// Round `r` splits with seed `seed + r`.
    pub seed: u64,
}

impl Default for MisspecConfig {
    fn default() -> Self {
        MisspecConfig {
            rounds: 100,
            subsample_size: 500,
            split_fraction: 0.8,
            ratio_threshold: 1.1,
            delta: 0.05,
            p: 0.95,
            seed: 0,
        }
    }
}

impl MisspecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(GpError::input("misspecification check needs at least one round"));
        }
        if self.subsample_size < 2 {
            return Err(GpError::input("misspecification subsample needs at least 2 points"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(GpError::input("split fraction must lie in (0, 1)"));
        }
        if !(self.ratio_threshold > 1.0) {
            return Err(GpError::input("ratio threshold must exceed 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(GpError::input("delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// `Reject` exactly when `mean_probability < 1 - delta`.
pub fn verdict(mean_probability: f64, delta: f64) -> Verdict {
    if mean_probability < 1.0 - delta {
        Verdict::Reject
    } else {
        Verdict::Accept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecReport {
    pub family: KernelFamily,
    /// Pass fraction of each completed round.
    pub round_probabilities: Vec<f64>,
    pub skipped_rounds: Vec<usize>,
    pub mean_probability: f64,
    pub verdict: Verdict,
    pub delta: f64,
    pub p: f64,
}

/// Per-point ratios `|ε̂_*| / |K_{*X}(K + σ²I)⁻¹ε̂_X − ε̂_*|`; `None` marks a
/// vanishing denominator.
pub fn residual_ratios<T: Scalar>(
    spec: &KernelSpec<T>,
    x_train: &DMatrix<T>,
    y_train: &DVector<T>,
    x_test: &DMatrix<T>,
    y_test: &DVector<T>,
) -> Result<Vec<Option<f64>>> {
    let model = fit_posterior(spec, x_train, y_train, None)?;
    // Posterior mean at training points, then the train residuals.
    let k_train = cross_covariance(spec, x_train, x_train)?;
    let fitted = k_train.tr_mul(model.alpha());
    let eps_train = y_train - fitted;
    let k_star = cross_covariance(spec, x_train, x_test)?;
    let m_star = k_star.tr_mul(model.alpha());
    let eps_test = y_test - &m_star;
    let smoothed = k_star.tr_mul(&model.chol().solve(&eps_train));
    Ok((0..y_test.len())
        .map(|i| {
            let num = to_f64(eps_test[i]).abs();
            let den = to_f64(smoothed[i] - eps_test[i]).abs();
            if den < DENOMINATOR_FLOOR {
                None
            } else {
                Some(num / den)
            }
        })
        .collect())
}

/// Fraction of points whose ratio is within the threshold.
pub fn pass_fraction(ratios: &[Option<f64>], threshold: f64) -> f64 {
    if ratios.is_empty() {
        return 1.0;
    }
    let pass = ratios.iter().filter(|r| r.is_none_or(|v| v <= threshold)).count();
    pass as f64 / ratios.len() as f64
}

/// Train/test split of the design rows for one round.
fn round_split(m: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (fraction * m as f64).round() as usize;
    if n_train < 2 || n_train >= m {
        return Err(GpError::input(format!("a {m}-point subsample cannot be split at {fraction}")));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Runs the repeated subsample/train/test ratio check for one kernel family.
///
/// The design is a farthest-point sample of `min(subsample_size, n)` rows;
/// each round draws a fresh random split of it and trains a zero-mean GP from
/// the default hyperparameters. Rounds whose training fails are skipped and
/// logged; more than half skipped is a procedure error.
pub fn misspec_check<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    family: KernelFamily,
    cfg: &MisspecConfig,
    trainer: &TrainConfig,
) -> Result<MisspecReport> {
    cfg.validate()?;
    trainer.validate()?;
    let n = x.nrows();
    if n < 10 {
        return Err(GpError::input(format!("misspecification check needs at least 10 points, got {n}")));
    }
    if y.len() != n {
        return Err(GpError::input("targets and inputs differ in length"));
    }
    let design = fps(x, cfg.subsample_size.min(n))?.indices;
    let xd = select_rows(x, &design);
    let yd = select_entries(y, &design);
    let m = design.len();

    let mut round_probabilities = Vec::with_capacity(cfg.rounds);
    let mut skipped_rounds = Vec::new();
    for r in 0..cfg.rounds {
        let (train, test) = round_split(m, cfg.split_fraction, cfg.seed.wrapping_add(r as u64))?;
        let xtr = select_rows(&xd, &train);
        let ytr = select_entries(&yd, &train);
        let xte = select_rows(&xd, &test);
        let yte = select_entries(&yd, &test);
        let outcome = train_gp(&KernelSpec::default_for(family), &xtr, &ytr, trainer)
            .and_then(|(spec, _)| residual_ratios(&spec, &xtr, &ytr, &xte, &yte));
        match outcome {
            Ok(ratios) => round_probabilities.push(pass_fraction(&ratios, cfg.ratio_threshold)),
            Err(e) => {
                log::warn!("misspecification round {r} for {family} skipped: {e}");
                skipped_rounds.push(r);
            }
        }
    }
    if 2 * skipped_rounds.len() > cfg.rounds {
        return Err(GpError::procedure(format!(
            "{} of {} misspecification rounds failed for {family}",
            skipped_rounds.len(),
            cfg.rounds
        )));
    }
    let mean_probability = round_probabilities.iter().sum::<f64>() / round_probabilities.len() as f64;
    Ok(MisspecReport {
        family,
        round_probabilities,
        skipped_rounds,
        mean_probability,
        verdict: verdict(mean_probability, cfg.delta),
        delta: cfg.delta,
        p: cfg.p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AksResult {
    pub selected: KernelFamily,
    pub selected_probability: f64,
    /// One entry per dictionary family; `None` where the check failed.
    pub reports: Vec<(KernelFamily, Option<MisspecReport>)>,
}

/// Picks the family with the largest mean pass probability. All families see
/// the same design and round splits. Ties go to the earlier family.
pub fn aks<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    dictionary: &[KernelFamily],
    cfg: &MisspecConfig,
    trainer: &TrainConfig,
) -> Result<AksResult> {
    if dictionary.is_empty() {
        return Err(GpError::input("kernel dictionary is empty"));
    }
    let mut best: Option<(KernelFamily, f64)> = None;
    let mut reports = Vec::with_capacity(dictionary.len());
    for &family in dictionary {
        match misspec_check(x, y, family, cfg, trainer) {
            Ok(rep) => {
                if best.is_none_or(|(_, p)| rep.mean_probability > p) {
                    best = Some((family, rep.mean_probability));
                }
                reports.push((family, Some(rep)));
            }
            Err(e @ GpError::Input(_)) => return Err(e),
            Err(e) => {
                log::warn!("kernel search: {family} failed: {e}");
                reports.push((family, None));
            }
        }
    }
    let (selected, selected_probability) =
        best.ok_or_else(|| GpError::procedure("kernel search failed for every family"))?;
    Ok(AksResult { selected, selected_probability, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn verdict_boundary() {
        assert_eq!(verdict(1.0, 0.01), Verdict::Accept);
        assert_eq!(verdict(0.95, 0.05), Verdict::Accept);
        assert_eq!(verdict(0.9, 0.05), Verdict::Reject);
    }

    #[test]
    fn interpolating_model_passes_at_training_point() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let s = KernelSpec::with_constrained(KernelFamily::Rbf, 1.0, 1.0, 1e-6).unwrap();
        let xt = DMatrix::from_column_slice(1, 1, &[2.0]);
        let yt = DVector::from_vec(vec![0.5]);
        let r = residual_ratios(&s, &x, &y, &xt, &yt).unwrap();
        assert!(r[0].is_none_or(|v| v <= 1.1), "{r:?}");
        assert_eq!(pass_fraction(&r, 1.1), 1.0);
    }

    #[test]
    fn pass_fraction_ignores_order() {
        let a = [Some(0.5), Some(2.0), None, Some(1.1)];
        let b = [None, Some(1.1), Some(0.5), Some(2.0)];
        assert_eq!(pass_fraction(&a, 1.1), 0.75);
        assert_eq!(pass_fraction(&a, 1.1), pass_fraction(&b, 1.1));
    }

    #[test]
    fn config_and_size_errors() {
        let x = DMatrix::from_fn(8, 1, |i, _| i as f64);
        let y = DVector::zeros(8);
        let t = TrainConfig { iterations: 2, ..Default::default() };
        assert!(misspec_check(&x, &y, KernelFamily::Rbf, &MisspecConfig::default(), &t).is_err());
        let bad = MisspecConfig { ratio_threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(aks(&x, &y, &[], &MisspecConfig::default(), &t).is_err());
    }

    #[test]
    fn singleton_dictionary_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: DMatrix<f64> = DMatrix::from_fn(40, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = x.column(0).map(|v| v.sin()) + DVector::from_fn(40, |_, _| 0.1 * rng.random_range(-1.0..1.0));
        let cfg = MisspecConfig { rounds: 3, ..Default::default() };
        let t = TrainConfig { iterations: 15, ..Default::default() };
        let a = aks(&x, &y, &[KernelFamily::Matern32], &cfg, &t).unwrap();
        assert_eq!(a.selected, KernelFamily::Matern32);
        let rep = a.reports[0].1.as_ref().unwrap();
        assert_eq!(rep.round_probabilities.len(), 3);
        assert!(rep.round_probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(a.selected_probability, rep.mean_probability);
        assert_eq!(aks(&x, &y, &[KernelFamily::Matern32], &cfg, &t).unwrap(), a);
    }
}
