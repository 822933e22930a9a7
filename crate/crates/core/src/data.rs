//! Data matrix with a missingness mask, robust column standardization and CSV IO.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::median;
use crate::mkernel::mscale;

/// `n x d` numeric matrix where missing cells hold `NaN` and are flagged in
/// `mask` (`true` = observed). Every row has at least one observed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    names: Vec<String>,
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("V{}", j + 1)).collect()
}

impl DataMatrix {
    /// Build from values and an observed-mask. Values under a `false` mask
    /// entry are replaced by `NaN`.
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>, names: Option<Vec<String>>) -> Result<Self> {
        let (n, d) = values.shape();
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput);
        }
        if mask.shape() != (n, d) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {:?}, values are {:?}",
                mask.shape(),
                (n, d)
            )));
        }
        let names = names.unwrap_or_else(|| default_names(d));
        if names.len() != d {
            return Err(Error::DimensionMismatch(format!("{} names for {d} columns", names.len())));
        }
        let mut values = values;
        for i in 0..n {
            let mut any = false;
            for j in 0..d {
                if mask[(i, j)] {
                    if !values[(i, j)].is_finite() {
                        return Err(Error::NonFiniteInput);
                    }
                    any = true;
                } else {
                    values[(i, j)] = f64::NAN;
                }
            }
            if !any {
                return Err(Error::EmptyRow(i));
            }
        }
        Ok(Self { values, mask, names })
    }

    /// Build from values where `NaN` marks a missing cell.
    pub fn from_nan(values: DMatrix<f64>, names: Option<Vec<String>>) -> Result<Self> {
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFiniteInput);
        }
        let mask = values.map(|v| !v.is_nan());
        Self::new(values, mask, names)
    }

    /// Fully observed matrix.
    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask, None)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Raw value matrix (`NaN` at missing cells).
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.mask[(i, j)].then(|| self.values[(i, j)])
    }

    /// Observed-cell count per row.
    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.nrows()).map(|i| self.mask.row(i).iter().filter(|m| **m).count()).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }

    /// Observed values of column `j`.
    pub fn column_observed(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).filter_map(|i| self.get(i, j)).collect()
    }

    /// Row `i` with missing cells as `NaN`.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn row_mask(&self, i: usize) -> Vec<bool> {
        self.mask.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.ncols();
        let values = DMatrix::from_fn(rows.len(), d, |r, j| self.values[(rows[r], j)]);
        let mask = DMatrix::from_fn(rows.len(), d, |r, j| self.mask[(rows[r], j)]);
        Self { values, mask, names: self.names.clone() }
    }

    /// Keep columns `cols`. Fails with `EmptyRow` if a row loses all its
    /// observed cells.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        let n = self.nrows();
        let values = DMatrix::from_fn(n, cols.len(), |i, c| self.values[(i, cols[c])]);
        let mask = DMatrix::from_fn(n, cols.len(), |i, c| self.mask[(i, cols[c])]);
        let names = cols.iter().map(|&c| self.names[c].clone()).collect();
        Self::new(values, mask, Some(names))
    }

    /// Multiply column `j` by `scales[j]`.
    pub fn scale_columns(&self, scales: &[f64]) -> Self {
        let mut out = self.clone();
        for j in 0..self.ncols() {
            for i in 0..self.nrows() {
                out.values[(i, j)] *= scales[j];
            }
        }
        out
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv_from(file)
    }

    /// Parse CSV with a header row. `NA`, `nan` and empty fields are missing.
    pub fn read_csv_from<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let d = names.len();
        let mut data = Vec::new();
        let mut n = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d {
                return Err(Error::Parse(format!("row {} has {} fields, expected {d}", line + 1, rec.len())));
            }
            for field in rec.iter() {
                let v = match field {
                    "" | "NA" | "nan" | "NaN" => f64::NAN,
                    s => s
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: cannot parse {s:?}", line + 1)))?,
                };
                data.push(v);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Self::from_nan(DMatrix::from_row_slice(n, d, &data), Some(names))
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for i in 0..self.nrows() {
            let rec: Vec<String> = (0..self.ncols())
                .map(|j| match self.get(i, j) {
                    Some(v) => format!("{v:?}"),
                    None => "NA".to_string(),
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column medians and robust scales. Only the scales are applied; the
/// medians are kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub medians: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &DataMatrix) -> Result<Self> {
        let d = data.ncols();
        let mut medians = Vec::with_capacity(d);
        let mut scales = Vec::with_capacity(d);
        for j in 0..d {
            let col = data.column_observed(j);
            if col.len() < 2 {
                return Err(Error::DegenerateColumn(j));
            }
            let m = median(&col);
            let centered: Vec<f64> = col.iter().map(|v| v - m).collect();
            let s = mscale(&centered)?;
            if s.degenerate || !(s.scale > 0.0) {
                return Err(Error::DegenerateColumn(j));
            }
            medians.push(m);
            scales.push(s.scale);
        }
        Ok(Self { medians, scales })
    }

    pub fn identity(d: usize) -> Self {
        Self { medians: vec![0.0; d], scales: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    /// Divide column `j` by `scales[j]`.
    pub fn apply(&self, data: &DataMatrix) -> Result<DataMatrix> {
        if data.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "standardizer has {} columns, data has {}",
                self.dim(),
                data.ncols()
            )));
        }
        let mut out = data.clone();
        for j in 0..data.ncols() {
            for i in 0..data.nrows() {
                out.values[(i, j)] = data.values[(i, j)] / self.scales[j];
            }
        }
        Ok(out)
    }

    /// Standardizer restricted to the given columns.
    pub fn subset(&self, cols: &[usize]) -> Self {
        Self {
            medians: cols.iter().map(|&c| self.medians[c]).collect(),
            scales: cols.iter().map(|&c| self.scales[c]).collect(),
        }
    }

    /// `(D mu, D sigma D)`.
    pub fn destandardize_cov(&self, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        if mu.len() != d || sigma.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "standardizer has {d} columns, got mu of length {} and sigma {:?}",
                mu.len(),
                sigma.shape()
            )));
        }
        let m = DVector::from_fn(d, |j, _| self.scales[j] * mu[j]);
        let s = DMatrix::from_fn(d, d, |j, l| self.scales[j] * sigma[(j, l)] * self.scales[l]);
        Ok((m, s))
    }
}

/// Fit the standardizer on `data` and return the standardized matrix.
pub fn standardize(data: &DataMatrix) -> Result<(DataMatrix, Standardizer)> {
    let s = Standardizer::fit(data)?;
    Ok((s.apply(data)?, s))
}
