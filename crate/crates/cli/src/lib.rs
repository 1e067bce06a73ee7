//! Experiment driver for the two-stage GP library: CSV ingestion, per-fold
//! standardization, JSON configs, the benchmark loop and the toy and contour
//! studies. The `tsgp` binary is a thin layer over these functions.
//!
//! NLL, QICE and coverage are computed on standardized targets unless the
//! config sets `"nll_scale": "original"`; RMSE is always reported in original
//! target units.

pub mod benchmark;
pub mod config;
pub mod contour;
pub mod data;
pub mod models;
pub mod output;
pub mod toy;

pub use benchmark::{run_benchmark, write_benchmark, BenchmarkReport, FoldRecord};
pub use config::{ExperimentConfig, Method, NllMode, NllScale, TwoStageOptions};
pub use contour::{run_contour, ContourConfig, ContourReport};
pub use data::{ingest_csv, parse_csv, read_matrix, Dataset};
pub use models::{fit_method, ModelSummary};
pub use toy::{run_toy, ToyFigure, ToyReport};
