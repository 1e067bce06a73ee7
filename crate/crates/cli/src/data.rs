//! CSV ingestion and per-fold standardization.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use twostage_gp::pipeline::Standardization;
use twostage_gp::{FoldSplit, GpError, Result};

/// Numeric regression data: every column but the last is a feature, the last
/// is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
}

/// One fold after standardization with statistics from its training part.
#[derive(Debug, Clone)]
pub struct StandardizedFold {
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub stats: Standardization,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(GpError::input(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        Ok(Dataset { name: name.into(), features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.features[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.targets[idx[i]]);
        (x, y)
    }

    /// Splits by `fold` and standardizes both parts with the training moments.
    pub fn standardized_fold(&self, fold: &FoldSplit) -> Result<StandardizedFold> {
        let (xtr, ytr) = self.rows(&fold.train);
        let (xte, yte) = self.rows(&fold.test);
        let stats = Standardization::fit(&xtr, &ytr);
        Ok(StandardizedFold {
            x_train: stats.apply_x(&xtr)?,
            y_train: stats.apply_y(&ytr),
            x_test: stats.apply_x(&xte)?,
            y_test: stats.apply_y(&yte),
            stats,
        })
    }

    /// Whole dataset standardized with its own moments.
    pub fn standardized(&self) -> Result<(DMatrix<f64>, DVector<f64>, Standardization)> {
        let stats = Standardization::fit(&self.features, &self.targets);
        Ok((stats.apply_x(&self.features)?, stats.apply_y(&self.targets), stats))
    }

    /// Writes the dataset as CSV, features first and the target last. Floats
    /// use the shortest representation that parses back to the same value.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| GpError::input(format!("CSV write failed: {e}"));
        if header {
            let mut names: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
            names.push("y".into());
            w.write_record(&names).map_err(io)?;
        }
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.targets[i].to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| GpError::input(format!("CSV write failed: {e}")))
    }
}

/// Reads a numeric CSV file. The dataset is named after the file stem.
pub fn ingest_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| GpError::input(format!("cannot read {}: {e}", path.display())))?;
    let name = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    parse_csv(&name, text.as_bytes(), has_header)
}

/// Parses CSV text; errors name the 1-based line and column of the bad cell.
pub fn parse_csv<R: Read>(name: &str, input: R, has_header: bool) -> Result<Dataset> {
    let m = parse_matrix(name, input, has_header)?;
    let (n, cols) = m.shape();
    if cols < 2 {
        return Err(GpError::input(format!("{name}: need at least one feature column and a target column")));
    }
    if n < 2 {
        return Err(GpError::input(format!("{name}: need at least 2 rows, got {n}")));
    }
    let targets = m.column(cols - 1).into_owned();
    Dataset::new(name, m.columns(0, cols - 1).into_owned(), targets)
}

/// Reads a CSV file of finite numbers into a matrix.
pub fn read_matrix(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| GpError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_matrix(&path.display().to_string(), file, has_header)
}

/// Rectangular numeric CSV with at least one row.
pub fn parse_matrix<R: Read>(name: &str, input: R, has_header: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| GpError::input(format!("{name}: malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        GpError::input(format!("{name}: line {line}, column {}: '{cell}' is not a finite number", j + 1))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(GpError::input(format!(
                    "{name}: line {line} has {} columns, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GpError::input(format!("{name}: no data rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use twostage_gp::make_folds;

    #[test]
    fn three_rows_two_columns() {
        let d = parse_csv("t", "1,2\n3,4\n5,6\n".as_bytes(), false).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 1));
        assert_eq!(d.targets.as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn header_is_skipped() {
        let d = parse_csv("t", "a,b\n1,2\n3,4\n5,6\n".as_bytes(), true).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 1));
    }

    #[test]
    fn nan_cell_is_located() {
        let err = parse_csv("t", "1,2\n3,NaN\n".as_bytes(), false).unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.exit_code(), 1);
        assert!(msg.contains("line 2") && msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(parse_csv("t", "".as_bytes(), false).is_err());
        assert!(parse_csv("t", "1\n2\n".as_bytes(), false).is_err());
        assert!(parse_csv("t", "1,2\n".as_bytes(), false).is_err());
        assert!(parse_csv("t", "1,2\n1,2,3\n".as_bytes(), false).is_err());
        assert!(parse_csv("t", "1,x\n1,2\n".as_bytes(), false).is_err());
    }

    #[test]
    fn training_fold_is_standardized() {
        let x = DMatrix::from_fn(40, 3, |i, j| if j == 2 { 7.0 } else { (i * (j + 1)) as f64 * 0.37 + 5.0 });
        let y = DVector::from_fn(40, |i, _| i as f64 * 2.0 - 3.0);
        let d = Dataset::new("t", x, y).unwrap();
        let fold = &make_folds(40, 1, 0.75, 3).unwrap()[0];
        let s = d.standardized_fold(fold).unwrap();
        let n = s.x_train.nrows() as f64;
        for j in 0..3 {
            let c = s.x_train.column(j);
            let mean = c.sum() / n;
            let std = (c.map(|v| (v - mean).powi(2)).sum() / n).sqrt();
            assert!(mean.abs() <= 1e-9);
            if j < 2 {
                assert!((std - 1.0).abs() <= 1e-6);
            } else {
                assert_eq!(s.stats.x_std[j], 1.0);
            }
        }
    }
}
