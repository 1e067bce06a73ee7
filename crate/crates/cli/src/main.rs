use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use twostage_gp::pipeline::ModelArtifact;
use twostage_gp::{aks, design_stats, fps, misspec_check, FittedModel, GpError, KernelFamily, Result};
use twostage_gp_cli::output::{write_json, write_rows};
use twostage_gp_cli::{
    fit_method, ingest_csv, read_matrix, run_benchmark, run_contour, run_toy, write_benchmark, ContourConfig, Dataset,
    ExperimentConfig, ToyFigure,
};

#[derive(Parser)]
#[command(name = "tsgp", version, about = "Two-stage Gaussian-process regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fold-level parallelism (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides the config's).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured method on the whole of each dataset and save the model.
    Fit(Common),
    /// Predict with a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// CSV of inputs; a trailing target column is allowed and ignored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        has_header: bool,
    },
    /// Repeated random-split benchmark of the configured method.
    Benchmark(Common),
    /// Kernel search over the configured dictionary (all families if unset).
    Aks(Common),
    /// Misspecification check of one kernel family.
    MisspecCheck {
        #[command(flatten)]
        common: Common,
        /// Family to check (defaults to the config's "kernel").
        #[arg(long)]
        kernel: Option<KernelFamily>,
    },
    /// Farthest-point design of the inputs of a CSV file.
    Fps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        has_header: bool,
    },
    /// Zero-mean versus two-stage coverage on a synthetic trend.
    Toy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "fig2")]
        figure: ToyFigure,
        /// Number of seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Subset-trained optima against the full-data NLL surface.
    Contour(Common),
}

fn out_dir(common: &Common, fallback: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| fallback.to_path_buf())
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().ok_or_else(|| GpError::input("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    if cfg.datasets.is_empty() {
        return Err(GpError::input("config lists no datasets"));
    }
    cfg.datasets.iter().map(|p| ingest_csv(p, cfg.has_header)).collect()
}

fn fit(common: &Common) -> Result<()> {
    let cfg = experiment(common)?;
    for data in datasets(&cfg)? {
        let (x, y, stats) = data.standardized()?;
        let (model, summary) = fit_method(&cfg, &x, &y, cfg.seed)?;
        let path = cfg.output.join(format!("{}_model.json", data.name));
        write_json(&path, &model.to_artifact(Some(stats)))?;
        log::info!("{}: {summary:?}", data.name);
        println!("{}", path.display());
    }
    Ok(())
}

fn predict(common: &Common, model: &Path, input: &Path, has_header: bool) -> Result<()> {
    let text = std::fs::read_to_string(model)
        .map_err(|e| GpError::input(format!("cannot read {}: {e}", model.display())))?;
    let artifact: ModelArtifact =
        serde_json::from_str(&text).map_err(|e| GpError::input(format!("invalid model artifact: {e}")))?;
    let fitted = FittedModel::<f64>::from_artifact(&artifact)?;
    let d = artifact.x_train.first().map_or(0, Vec::len);
    let raw = read_matrix(input, has_header)?;
    let x = match raw.ncols() {
        c if c == d => raw,
        c if c == d + 1 => raw.columns(0, d).into_owned(),
        c => return Err(GpError::input(format!("model expects {d} input columns, file has {c}"))),
    };
    let stats = artifact.standardization.clone();
    let xs: DMatrix<f64> = match &stats {
        Some(s) => s.apply_x(&x)?,
        None => x,
    };
    let pred = fitted.predict(&xs)?;
    let (shift, scale) = stats.map_or((0.0, 1.0), |s| (s.y_mean, s.y_std));
    let path = out_dir(common, Path::new("out")).join("predictions.csv");
    let rows = (0..pred.len()).map(|i| {
        [pred.mean[i] * scale + shift, pred.variance[i].sqrt() * scale].map(|v| v.to_string())
    });
    write_rows(&path, &["mean", "std"], rows)?;
    println!("{}", path.display());
    Ok(())
}

fn benchmark(common: &Common) -> Result<()> {
    let cfg = experiment(common)?;
    for data in datasets(&cfg)? {
        let report = run_benchmark(&cfg, &data)?;
        let (json, _) = write_benchmark(&report, &cfg.output)?;
        let a = &report.aggregate;
        println!(
            "{} {:?}: RMSE {:.4} ± {:.4}, NLL {:.4} ± {:.4}{}, QICE {:.2} ± {:.2}%, coverage {:.3}, {} failed folds -> {}",
            report.dataset,
            report.method,
            a.rmse.mean,
            a.rmse.std,
            a.nll.mean,
            a.nll.std,
            if a.nll_unstable { " (unstable)" } else { "" },
            a.qice_percent.mean,
            a.qice_percent.std,
            a.coverage.mean,
            report.failed_folds.len(),
            json.display()
        );
    }
    Ok(())
}

fn aks_command(common: &Common) -> Result<()> {
    let cfg = experiment(common)?;
    let dict = cfg.dictionary.clone().unwrap_or_else(|| KernelFamily::ALL.to_vec());
    for data in datasets(&cfg)? {
        let (x, y, _) = data.standardized()?;
        let res = aks(&x, &y, &dict, &cfg.misspec_config(cfg.seed), &cfg.train_config(cfg.seed))?;
        let path = cfg.output.join(format!("{}_aks.json", data.name));
        write_json(&path, &res)?;
        println!("{}: selected {} (mean pass rate {:.3})", data.name, res.selected, res.selected_probability);
    }
    Ok(())
}

fn misspec_command(common: &Common, kernel: Option<KernelFamily>) -> Result<()> {
    let cfg = experiment(common)?;
    let family = kernel.or(cfg.kernel).ok_or_else(|| GpError::input("no kernel given (--kernel or config)"))?;
    for data in datasets(&cfg)? {
        let (x, y, _) = data.standardized()?;
        let rep = misspec_check(&x, &y, family, &cfg.misspec_config(cfg.seed), &cfg.train_config(cfg.seed))?;
        let path = cfg.output.join(format!("{}_misspec_{family}.json", data.name));
        write_json(&path, &rep)?;
        println!("{}: {family} {:?} (mean pass rate {:.3})", data.name, rep.verdict, rep.mean_probability);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct FpsReport {
    indices: Vec<usize>,
    fill_trace: Vec<f64>,
    fill_distance: f64,
    separation_distance: f64,
}

fn fps_command(common: &Common, input: &Path, k: usize, has_header: bool) -> Result<()> {
    let data = ingest_csv(input, has_header)?;
    let sample = fps(&data.features, k)?;
    let (fill_distance, separation_distance) = design_stats(&data.features, &sample.indices)?;
    let report = FpsReport { indices: sample.indices, fill_trace: sample.fill_trace, fill_distance, separation_distance };
    let path = out_dir(common, Path::new("out")).join(format!("{}_fps.json", data.name));
    write_json(&path, &report)?;
    println!("{}", path.display());
    Ok(())
}

fn toy_command(common: &Common, figure: ToyFigure, seeds: u64) -> Result<()> {
    let start = common.seed.unwrap_or(0);
    let list: Vec<u64> = (start..start + seeds).collect();
    let dir = out_dir(common, Path::new("out"));
    let report = run_toy(figure, &list, Some(&dir))?;
    println!(
        "{}: median coverage zero-mean {:.3}, two-stage {:.3} over {} seeds",
        figure.name(),
        report.median_zero_mean_coverage,
        report.median_two_stage_coverage,
        list.len()
    );
    Ok(())
}

fn contour_command(common: &Common) -> Result<()> {
    let path = common.config.as_ref().ok_or_else(|| GpError::input("--config is required"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| GpError::input(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ContourConfig =
        serde_json::from_str(&text).map_err(|e| GpError::input(format!("invalid contour config: {e}")))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let csv = cfg.dataset.clone().ok_or_else(|| GpError::input("contour config lacks \"dataset\""))?;
    let data = ingest_csv(&csv, cfg.has_header)?;
    let report = run_contour(&cfg, &data)?;
    let out = out_dir(common, Path::new("out")).join(format!("{}_contour.json", data.name));
    write_json(&out, &report)?;
    for s in &report.subsets {
        println!("{:>5.0}%: distance to full-data optimum {:.4}", 100.0 * s.fraction, s.distance_to_full);
    }
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = match &cli.command {
        Command::Fit(c) | Command::Benchmark(c) | Command::Aks(c) | Command::Contour(c) => c.jobs,
        Command::Predict { common, .. }
        | Command::MisspecCheck { common, .. }
        | Command::Fps { common, .. }
        | Command::Toy { common, .. } => common.jobs,
    };
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| GpError::input(format!("cannot set up {j} workers: {e}")))?;
    }
    match &cli.command {
        Command::Fit(c) => fit(c),
        Command::Predict { common, model, input, has_header } => predict(common, model, input, *has_header),
        Command::Benchmark(c) => benchmark(c),
        Command::Aks(c) => aks_command(c),
        Command::MisspecCheck { common, kernel } => misspec_command(common, *kernel),
        Command::Fps { common, input, k, has_header } => fps_command(common, input, *k, *has_header),
        Command::Toy { common, figure, seeds } => toy_command(common, *figure, *seeds),
        Command::Contour(c) => contour_command(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsgp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
