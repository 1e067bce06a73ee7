//! Design and resampling utilities: farthest-point sampling, uniform
//! subsampling and random train/test folds.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::euclidean;
use crate::scalar::{lit, Scalar};

/// Output of [`fps`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSample<T> {
    /// Selected rows, in selection order.
    pub indices: Vec<usize>,
    /// `fill_trace[t]` is the largest distance from any row to the first `t + 1` selections.
    pub fill_trace: Vec<T>,
}

fn row<T: Scalar>(x: &DMatrix<T>, i: usize) -> Vec<T> {
    x.row(i).iter().copied().collect()
}

fn rows<T: Scalar>(x: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..x.nrows()).map(|i| row(x, i)).collect()
}

/// Greedy max-min design. Starts from the row nearest the centroid and then
/// repeatedly adds the row farthest from the current selection. Ties go to
/// the lowest index.
pub fn fps<T: Scalar>(x: &DMatrix<T>, k: usize) -> Result<DesignSample<T>> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(GpError::input(format!("cannot select {k} of {n} points")));
    }
    let pts = rows(x);
    let d = x.ncols();
    let mut centroid = vec![T::zero(); d];
    for p in &pts {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += *v;
        }
    }
    let nf: T = lit(n as f64);
    centroid.iter_mut().for_each(|c| *c /= nf);

    let mut first = 0;
    let mut best = euclidean(&pts[0], &centroid);
    for (i, p) in pts.iter().enumerate().skip(1) {
        let dist = euclidean(p, &centroid);
        if dist < best {
            best = dist;
            first = i;
        }
    }

    let mut selected = vec![false; n];
    let mut mind: Vec<T> = pts.iter().map(|p| euclidean(p, &pts[first])).collect();
    selected[first] = true;
    let mut indices = Vec::with_capacity(k);
    let mut fill_trace = Vec::with_capacity(k);
    indices.push(first);
    fill_trace.push(max_of(&mind));

    while indices.len() < k {
        let mut next = usize::MAX;
        for j in 0..n {
            if !selected[j] && (next == usize::MAX || mind[j] > mind[next]) {
                next = j;
            }
        }
        selected[next] = true;
        indices.push(next);
        let p = &pts[next];
        for (j, m) in mind.iter_mut().enumerate() {
            let dist = euclidean(&pts[j], p);
            if dist < *m {
                *m = dist;
            }
        }
        fill_trace.push(max_of(&mind));
    }
    Ok(DesignSample { indices, fill_trace })
}

fn max_of<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// Separation distance `q` (half the smallest pairwise distance within the
/// selection) and fill distance `h` (largest distance from a row of `x` to
/// the selection).
pub fn design_stats<T: Scalar>(x: &DMatrix<T>, indices: &[usize]) -> Result<(T, T)> {
    if indices.len() < 2 {
        return Err(GpError::input("design statistics need at least two selected points"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.nrows()) {
        return Err(GpError::input(format!("index {bad} out of range for {} points", x.nrows())));
    }
    let pts = rows(x);
    let mut min_pair: Option<T> = None;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            let dist = euclidean(&pts[i], &pts[j]);
            if min_pair.is_none_or(|m| dist < m) {
                min_pair = Some(dist);
            }
        }
    }
    let mut fill = T::zero();
    for p in &pts {
        let mut m: Option<T> = None;
        for &i in indices {
            let dist = euclidean(p, &pts[i]);
            if m.is_none_or(|v| dist < v) {
                m = Some(dist);
            }
        }
        let m = m.expect("non-empty selection");
        if m > fill {
            fill = m;
        }
    }
    Ok((min_pair.expect("two or more indices") * lit(0.5), fill))
}

/// `k` distinct indices drawn uniformly from `0..n`, in draw order.
pub fn random_subsample(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(GpError::input("subsample size must be at least 1"));
    }
    if k > n {
        return Err(GpError::input(format!("cannot draw {k} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, n, k).into_vec())
}

/// One random train/test partition. Both index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_folds` independent random splits; fold `i` uses seed `seed_base + i`.
/// The training part has `round(train_fraction * n)` points.
pub fn make_folds(n: usize, n_folds: usize, train_fraction: f64, seed_base: u64) -> Result<Vec<FoldSplit>> {
    if n_folds == 0 {
        return Err(GpError::input("need at least one fold"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GpError::input(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(GpError::input(format!(
            "{n} points with train fraction {train_fraction} leave an empty side"
        )));
    }
    (0..n_folds)
        .map(|i| {
            let perm = random_subsample(n, n, seed_base.wrapping_add(i as u64))?;
            let mut train = perm[..n_train].to_vec();
            let mut test = perm[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok(FoldSplit { train, test })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn line(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| i as f64)
    }

    #[test]
    fn fps_line_examples() {
        let x = line(5);
        assert_eq!(fps(&x, 1).unwrap().indices, vec![2]);
        let s = fps(&x, 3).unwrap();
        assert_eq!(s.indices, vec![2, 0, 4]);
        assert_eq!(s.fill_trace, vec![2.0, 2.0, 1.0]);
        let mut all = fps(&x, 5).unwrap().indices;
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(fps(&x, 6).is_err());
        assert!(fps(&x, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicate_rows() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let s = fps(&x, 4).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn design_stats_examples() {
        let (q, h) = design_stats(&line(10), &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!((q, h), (0.5, 0.0));
        let (q, h) = design_stats(&line(5), &[2, 0, 4]).unwrap();
        assert_eq!((q, h), (1.0, 1.0));
        assert!(design_stats(&line(5), &[1]).is_err());
    }

    #[test]
    fn fill_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(120, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = fps(&x, 60).unwrap();
        for w in s.fill_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn subsample_contract() {
        let mut p = random_subsample(7, 7, 1).unwrap();
        p.sort_unstable();
        assert_eq!(p, (0..7).collect::<Vec<_>>());
        assert!(random_subsample(7, 0, 1).is_err());
        assert!(random_subsample(7, 8, 1).is_err());
        assert_eq!(random_subsample(100, 10, 5).unwrap(), random_subsample(100, 10, 5).unwrap());
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        let mut counts = [0usize; 4];
        for s in 0..10_000u64 {
            counts[random_subsample(4, 1, s).unwrap()[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn folds_partition() {
        let f = make_folds(10, 1, 0.8, 0).unwrap();
        assert_eq!(f[0].train.len(), 8);
        assert_eq!(f[0].test.len(), 2);
        let mut all: Vec<usize> = f[0].train.iter().chain(&f[0].test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(make_folds(50, 3, 0.9, 17).unwrap(), make_folds(50, 3, 0.9, 17).unwrap());
        assert!(make_folds(10, 0, 0.8, 0).is_err());
        assert!(make_folds(10, 1, 1.0, 0).is_err());
        assert!(make_folds(1, 1, 0.5, 0).is_err());
    }

    #[test]
    fn twenty_folds_cover_most_points() {
        let folds = make_folds(1000, 20, 0.9, 0).unwrap();
        let mut seen = vec![false; 1000];
        for f in &folds {
            assert_eq!(f.test.len(), 100);
            for &i in &f.test {
                seen[i] = true;
            }
        }
        assert!(seen.iter().filter(|s| **s).count() >= 850);
    }
}
