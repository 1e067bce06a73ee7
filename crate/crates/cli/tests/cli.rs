use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostage_gp::gp::sample_prior;
use twostage_gp::{KernelFamily, KernelSpec};
use twostage_gp_cli::{
    parse_csv, run_benchmark, run_contour, ContourConfig, Dataset, ExperimentConfig, Method,
};

fn tsgp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tsgp")).args(args).output().expect("binary runs")
}

fn write_dataset(dir: &Path, name: &str, d: &Dataset) -> PathBuf {
    let path = dir.join(format!("{name}.csv"));
    d.write_csv(fs::File::create(&path).unwrap(), false).unwrap();
    path
}

fn smooth_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| 3.0 + x.row(i).sum().sin() * 2.0 + 0.1 * rng.random_range(-1.0..1.0));
    Dataset::new("smooth", x, y).unwrap()
}

fn small_config(data: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(vec![data.to_path_buf()], Method::ExactGp);
    cfg.kernel = Some(KernelFamily::Rbf);
    cfg.n_folds = 1;
    cfg.train_fraction = 0.5;
    cfg.train.iterations = 20;
    cfg.metrics.ua_quantile = 0.2;
    cfg.output = out.to_path_buf();
    cfg
}

fn save_config(cfg: &ExperimentConfig, path: &Path) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

#[test]
fn single_fold_smoke_run_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), "ten", &smooth_dataset(10, 1, 1));
    let cfg_path = dir.path().join("cfg.json");
    save_config(&small_config(&data, &dir.path().join("out")), &cfg_path);
    let out = tsgp(&["benchmark", "--config", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/ten_exact-gp_folds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("0,ok,"));
}

#[test]
fn reports_are_deterministic_apart_from_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), "det", &smooth_dataset(60, 2, 2));
    let mut cfg = small_config(&data, &dir.path().join("unused"));
    cfg.n_folds = 4;
    cfg.train_fraction = 0.75;
    let cfg_path = dir.path().join("cfg.json");
    save_config(&cfg, &cfg_path);
    let strip = |run: &str, jobs: &str| {
        let out_dir = dir.path().join(run);
        let out = tsgp(&["benchmark", "--config", cfg_path.to_str().unwrap(), "--jobs", jobs, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("det_exact-gp_report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timestamp");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(strip("a", "1"), strip("b", "3"));
}

#[test]
fn rmse_is_reported_in_target_units() {
    let dir = tempfile::tempdir().unwrap();
    let base = smooth_dataset(40, 1, 3);
    let scaled = Dataset::new("scaled", base.features.clone(), &base.targets * 10.0).unwrap();
    let mut cfg = small_config(Path::new("unused.csv"), dir.path());
    cfg.n_folds = 3;
    cfg.train_fraction = 0.75;
    let a = run_benchmark(&cfg, &base).unwrap();
    let b = run_benchmark(&cfg, &scaled).unwrap();
    for (fa, fb) in a.successful_metrics().iter().zip(b.successful_metrics()) {
        assert!((fb.rmse / fa.rmse - 10.0).abs() <= 1e-9, "{} vs {}", fa.rmse, fb.rmse);
        assert!((fb.nll - fa.nll).abs() <= 1e-9);
    }
}

#[test]
fn original_scale_nll_shifts_by_log_target_std() {
    let data = smooth_dataset(40, 1, 4);
    let mut cfg = small_config(Path::new("unused.csv"), Path::new("unused"));
    cfg.n_folds = 2;
    cfg.train_fraction = 0.75;
    let std = run_benchmark(&cfg, &data).unwrap();
    cfg.nll_scale = twostage_gp_cli::NllScale::Original;
    let orig = run_benchmark(&cfg, &data).unwrap();
    for (k, (a, b)) in std.successful_metrics().iter().zip(orig.successful_metrics()).enumerate() {
        let fold = twostage_gp::make_folds(40, 2, 0.75, 0).unwrap().remove(k);
        let s = data.standardized_fold(&fold).unwrap().stats;
        assert!((b.nll - a.nll - s.y_std.ln()).abs() <= 1e-12);
        assert_eq!(a.rmse, b.rmse);
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = tsgp(&["benchmark", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"datasets": ["x.csv"], "method": "exact-gp", "kernel": "rbf", "n_fold": 3}"#).unwrap();
    assert_eq!(tsgp(&["benchmark", "--config", bad.to_str().unwrap()]).status.code(), Some(1));

    // Every fold is too small for the kernel search, so the run as a whole fails.
    let data = write_dataset(dir.path(), "tiny", &smooth_dataset(12, 1, 5));
    let mut cfg = small_config(&data, &dir.path().join("out"));
    cfg.method = Method::AksExactGp;
    cfg.dictionary = Some(vec![KernelFamily::Rbf]);
    cfg.n_folds = 2;
    let cfg_path = dir.path().join("aks.json");
    save_config(&cfg, &cfg_path);
    assert_eq!(tsgp(&["benchmark", "--config", cfg_path.to_str().unwrap()]).status.code(), Some(3));

    assert_eq!(tsgp(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn fit_then_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = smooth_dataset(30, 2, 6);
    let path = write_dataset(dir.path(), "train", &data);
    let cfg_path = dir.path().join("cfg.json");
    let out_dir = dir.path().join("out");
    save_config(&small_config(&path, &out_dir), &cfg_path);
    let fit = tsgp(&["fit", "--config", cfg_path.to_str().unwrap()]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let model = out_dir.join("train_model.json");
    let pred = tsgp(&[
        "predict", "--model", model.to_str().unwrap(), "--input", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(pred.status.success(), "{}", String::from_utf8_lossy(&pred.stderr));
    let text = fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), 31);
    // In-sample predictions of a smooth target should sit close to it.
    let means: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    let err = means.iter().zip(data.targets.iter()).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / 30.0;
    assert!(err.sqrt() < 0.5, "in-sample rmse {}", err.sqrt());
}

#[test]
fn fps_command_writes_a_design() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), "pts", &smooth_dataset(25, 2, 7));
    let out = tsgp(&["fps", "--input", path.to_str().unwrap(), "--k", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pts_fps.json")).unwrap()).unwrap();
    assert_eq!(v["indices"].as_array().unwrap().len(), 5);
}

fn gp_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let truth = KernelSpec::with_constrained(KernelFamily::Rbf, 1.0, 1.0, 0.3).unwrap();
    let y = sample_prior(&truth, &x, &mut rng).unwrap();
    Dataset::new("gp", x, y).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

#[test]
fn subset_optima_approach_the_full_data_optimum() {
    let cfg = ContourConfig { subsets: vec![0.1, 0.5, 1.0], ..Default::default() };
    let mut dist = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..10 {
        let report = run_contour(&ContourConfig { seed, ..cfg.clone() }, &gp_dataset(300, 100 + seed)).unwrap();
        for (k, s) in report.subsets.iter().enumerate() {
            dist[k].push(s.distance_to_full);
        }
        assert!(report.values.iter().flatten().all(|v| v.is_finite()));
        let (a, b) = (report.grid_argmin, report.optimum_cell);
        assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1, "argmin {a:?} vs optimum {b:?}");
    }
    let m: Vec<f64> = dist.into_iter().map(median).collect();
    assert!(m[0] >= m[1] && m[1] >= m[2], "median distances {m:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-1e300f64..1e300, 3), 2..20),
    ) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 2, |i, j| rows[i][j]);
        let y = DVector::from_fn(n, |i, _| rows[i][2]);
        let d = Dataset::new("rt", x, y).unwrap();
        for header in [false, true] {
            let mut buf = Vec::new();
            d.write_csv(&mut buf, header).unwrap();
            let back = parse_csv("rt", buf.as_slice(), header).unwrap();
            prop_assert_eq!(&back.features, &d.features);
            prop_assert_eq!(&back.targets, &d.targets);
        }
    }
}
