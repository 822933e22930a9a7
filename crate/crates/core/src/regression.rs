//! Ridge plug-in regression from a location/scatter estimate, prediction
//! with imputation of the predictors, and (k, λ) selection by robust
//! cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellcov::{cellcov, CovEstimate, CovOptions};
use crate::cellpca::PcaModel;
use crate::data::{DataMatrix, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, symmetrize};
use crate::mkernel::{mscale, Kernel};
use crate::rng::stream;

/// Largest condition number accepted for `Sigma_x + lambda I`.
pub const MAX_CONDITION: f64 = 1e12;

/// Coefficients of a plug-in fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// `p x q` slope matrix.
    pub slopes: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
}

/// `B = (Sx + λI)^{-1} Sxy`, `b = mu_y - B^T mu_x`,
/// `Sigma_eps = Sy - Syx (Sx + λI)^{-1} Sxy`. The first `p` coordinates are
/// the predictors.
pub fn plugin(mu: &DVector<f64>, sigma: &DMatrix<f64>, lambda: f64, p: usize) -> Result<Coefficients> {
    let d = mu.len();
    if sigma.shape() != (d, d) || p == 0 || p >= d {
        return Err(Error::DimensionMismatch(format!("cannot split dimension {d} into p = {p} predictors")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge parameter must be >= 0, got {lambda}")));
    }
    let q = d - p;
    let mut sx = sigma.view((0, 0), (p, p)).into_owned();
    for j in 0..p {
        sx[(j, j)] += lambda;
    }
    let sx = symmetrize(&sx);
    let cond = condition_number(&sx);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularSystem(cond));
    }
    let sxy = sigma.view((0, p), (p, q)).into_owned();
    let sy = sigma.view((p, p), (q, q)).into_owned();
    let chol = sx.cholesky().ok_or(Error::SingularSystem(cond))?;
    let slopes = chol.solve(&sxy);
    let mu_x = mu.rows(0, p).into_owned();
    let mu_y = mu.rows(p, q).into_owned();
    let intercept = &mu_y - slopes.transpose() * &mu_x;
    let sigma_eps = symmetrize(&(&sy - sxy.transpose() * &slopes));
    Ok(Coefficients { slopes, intercept, sigma_eps })
}

/// Model used to clean new predictor vectors before prediction, plus the
/// predictor-block location/scatter used for leverage distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub standardizer: Standardizer,
    pub pca: PcaModel,
    pub cov: CovEstimate,
    /// Scales of the training imputation residuals `x - xhat` (original units).
    pub residual_scales: Vec<f64>,
}

impl PredictorModel {
    pub fn fit(x: &DataMatrix, k: usize, opts: &CovOptions) -> Result<Self> {
        let kx = k.min(x.ncols().saturating_sub(1));
        let fit = cellcov(x, kx, opts)?;
        let standardizer = fit.estimate.standardizer.clone();
        let mut residual_scales = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col: Vec<f64> = (0..x.nrows())
                .filter(|&i| x.is_observed(i, j))
                .map(|i| fit.pca.residuals[(i, j)] * standardizer.scales[j])
                .collect();
            let s = mscale(&col)?;
            residual_scales.push(if s.degenerate { standardizer.scales[j] * fit.pca.sigma1[j] } else { s.scale });
        }
        Ok(Self { pca: fit.pca.model(), cov: fit.estimate, standardizer, residual_scales })
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Imputed predictor vector and the fitted (projected) vector, both in
    /// original units.
    pub fn impute(&self, x: &[f64], mask: &[bool]) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = self.dim();
        if x.len() != p || mask.len() != p {
            return Err(Error::DimensionMismatch(format!("predictor vector has {} entries, expected {p}", x.len())));
        }
        let z: Vec<f64> = (0..p).map(|j| if mask[j] { x[j] / self.standardizer.scales[j] } else { 0.0 }).collect();
        let s = self.pca.score_point(&z, mask)?;
        let fitted = DVector::from_fn(p, |j, _| s.fitted[j] * self.standardizer.scales[j]);
        let imp = DVector::from_fn(p, |j, _| {
            if mask[j] {
                fitted[j] + s.cell_weights[j] * (x[j] - fitted[j])
            } else {
                fitted[j]
            }
        });
        Ok((imp, fitted))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Coefficients,
    pub lambda: f64,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub cov: CovEstimate,
    /// Robust PCA of the joint (standardized) data, for casewise diagnostics.
    pub joint_pca: PcaModel,
    pub predictor: PredictorModel,
    pub column_names: Vec<String>,
}

impl RegressionFit {
    pub fn slopes(&self) -> &DMatrix<f64> {
        &self.coefficients.slopes
    }

    pub fn intercept(&self) -> &DVector<f64> {
        &self.coefficients.intercept
    }

    pub fn sigma_eps(&self) -> &DMatrix<f64> {
        &self.coefficients.sigma_eps
    }

    /// `b + B^T x_imp` for a predictor vector with missingness mask.
    pub fn predict(&self, x: &[f64], mask: &[bool]) -> Result<DVector<f64>> {
        let (imp, _) = self.predictor.impute(x, mask)?;
        Ok(self.predict_imputed(&imp))
    }

    pub fn predict_imputed(&self, x_imp: &DVector<f64>) -> DVector<f64> {
        &self.coefficients.intercept + self.coefficients.slopes.transpose() * x_imp
    }

    /// Predictions for every row of a predictor matrix (`n x p`).
    pub fn predict_matrix(&self, x: &DataMatrix) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.q);
        for i in 0..x.nrows() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let y = self.predict(&row, &x.row_mask(i))?;
            out.set_row(i, &y.transpose());
        }
        Ok(out)
    }
}

fn split_predictors(data: &DataMatrix, p: usize) -> Result<DataMatrix> {
    if p == 0 || p >= data.ncols() {
        return Err(Error::DimensionMismatch(format!("cannot use {p} of {} columns as predictors", data.ncols())));
    }
    let cols: Vec<usize> = (0..p).collect();
    data.select_cols(&cols)
}

/// cellMR fit: cellCov on the joint data (predictors first), plug-in ridge
/// coefficients, and a separate robust PCA on the predictors for prediction.
pub fn fit(data: &DataMatrix, p: usize, k: usize, lambda: f64, opts: &CovOptions) -> Result<RegressionFit> {
    let x = split_predictors(data, p)?;
    let joint = cellcov(data, k, opts)?;
    let coefficients = plugin(&joint.estimate.mu, &joint.estimate.sigma, lambda, p)?;
    let predictor = PredictorModel::fit(&x, k, opts)?;
    Ok(RegressionFit {
        coefficients,
        lambda,
        k,
        p,
        q: data.ncols() - p,
        joint_pca: joint.pca.model(),
        cov: joint.estimate,
        predictor,
        column_names: data.names().to_vec(),
    })
}

/// Classical ridge on complete cases: sample mean and divisor-n covariance
/// plugged into the same formulas.
pub fn classical_fit(data: &DataMatrix, p: usize, lambda: f64) -> Result<Coefficients> {
    let (mu, sigma) = classical_moments(data)?;
    plugin(&mu, &sigma, lambda, p)
}

/// Sample mean and divisor-n covariance over the complete rows.
pub fn classical_moments(data: &DataMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = data.ncols();
    let rows: Vec<usize> = (0..data.nrows()).filter(|&i| data.row_mask(i).iter().all(|m| *m)).collect();
    if rows.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(d);
    for &i in &rows {
        mu += data.row(i);
    }
    mu /= n;
    let mut s = DMatrix::zeros(d, d);
    for &i in &rows {
        let c = data.row(i) - &mu;
        s += &c * c.transpose();
    }
    Ok((mu, s / n))
}

/// Default ridge grid: ten log-spaced values from 1e-4 to 1e2 times
/// `tr(Sigma_x) / p`, with 0 in front when `Sigma_x` has condition number
/// below 1e5.
pub fn default_lambda_grid(sigma_x: &DMatrix<f64>) -> Vec<f64> {
    let p = sigma_x.nrows();
    let base = sigma_x.trace() / p as f64;
    let mut grid: Vec<f64> = (0..10).map(|i| base * 10f64.powf(-4.0 + 6.0 * i as f64 / 9.0)).collect();
    if condition_number(sigma_x) < 1e5 {
        grid.insert(0, 0.0);
    }
    grid
}

/// Default rank grid `1..=min(10, d - 1)`.
pub fn default_k_grid(d: usize) -> Vec<usize> {
    (1..=10.min(d.saturating_sub(1))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `(k, lambda)` pairs, k-major.
    pub grid: Vec<(usize, f64)>,
    /// Cross-validated weighted prediction error; infinite where the fit failed.
    pub cv_values: Vec<f64>,
    pub chosen: (usize, f64),
    /// Fold index of each row.
    pub fold_assignment: Vec<usize>,
}

/// Fold index for every row: seeded shuffle, then contiguous blocks.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "cv-folds", &[]));
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos * folds / n;
    }
    for h in 0..folds {
        if out.iter().filter(|&&f| f == h).count() < 2 {
            return Err(Error::FoldTooSmall(h));
        }
    }
    Ok(out)
}

/// Weighted mean squared prediction error of one fold, per response column.
///
/// Cell weights come from the residuals standardized by their column
/// M-scale, case weights from the weighted mean squared residual of each row
/// over its M-scale; the weight of a cell is `m * w_case * w_cell^2`.
pub fn fold_wmse(y: &DataMatrix, yhat: &DMatrix<f64>, kernel: &Kernel) -> Vec<f64> {
    let (n, q) = (y.nrows(), y.ncols());
    let resid = DMatrix::from_fn(n, q, |i, j| y.get(i, j).map(|v| v - yhat[(i, j)]).unwrap_or(0.0));
    let mut wcell = DMatrix::zeros(n, q);
    for j in 0..q {
        let col: Vec<f64> = (0..n).filter(|&i| y.is_observed(i, j)).map(|i| resid[(i, j)]).collect();
        let s = if col.is_empty() { None } else { mscale(&col).ok().filter(|s| !s.degenerate) };
        for i in 0..n {
            if y.is_observed(i, j) {
                wcell[(i, j)] = match s {
                    Some(s) => kernel.weight(resid[(i, j)] / s.scale),
                    None => 1.0,
                };
            }
        }
    }
    let mut dvals = vec![f64::NAN; n];
    for i in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..q {
            if y.is_observed(i, j) {
                num += wcell[(i, j)] * resid[(i, j)].powi(2);
                den += wcell[(i, j)];
            }
        }
        if den > 0.0 {
            dvals[i] = num / den;
        }
    }
    let finite: Vec<f64> = dvals.iter().copied().filter(|v| v.is_finite()).collect();
    let s2 = if finite.is_empty() { None } else { mscale(&finite).ok().filter(|s| !s.degenerate) };
    let wcase: Vec<f64> = dvals
        .iter()
        .map(|&dv| match (dv.is_finite(), s2) {
            (false, _) => 0.0,
            (true, Some(s)) => kernel.weight(dv / s.scale),
            (true, None) => 1.0,
        })
        .collect();
    (0..q)
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            let (mut plain, mut cnt) = (0.0, 0usize);
            for i in 0..n {
                if !y.is_observed(i, j) {
                    continue;
                }
                let w = wcase[i] * wcell[(i, j)].powi(2);
                num += w * resid[(i, j)].powi(2);
                den += w;
                plain += resid[(i, j)].powi(2);
                cnt += 1;
            }
            if den > 0.0 {
                num / den
            } else if cnt > 0 {
                plain / cnt as f64
            } else {
                f64::NAN
            }
        })
        .collect()
}

fn argmin_grid(grid: &[(usize, f64)], values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for idx in 1..grid.len() {
        let (v, b) = (values[idx], values[best]);
        let better = v < b
            || (v == b && (grid[idx].0 < grid[best].0 || (grid[idx].0 == grid[best].0 && grid[idx].1 < grid[best].1)));
        if better {
            best = idx;
        }
    }
    grid[best]
}

/// K-fold robust cross-validation over `k_grid x lambda_grid`.
pub fn cross_validate(
    data: &DataMatrix,
    p: usize,
    k_grid: &[usize],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
    opts: &CovOptions,
) -> Result<CvReport> {
    if k_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("empty tuning grid".into()));
    }
    split_predictors(data, p)?;
    let n = data.nrows();
    let q = data.ncols() - p;
    let assignment = assign_folds(n, folds, seed)?;
    let kernel = opts.pca.rho1;
    let grid: Vec<(usize, f64)> =
        k_grid.iter().flat_map(|&k| lambda_grid.iter().map(move |&l| (k, l))).collect();

    // per (fold, k): WMSE for every lambda and response column
    let jobs: Vec<(usize, usize)> = (0..folds).flat_map(|h| k_grid.iter().map(move |&k| (h, k))).collect();
    let results: Vec<Vec<Option<Vec<f64>>>> = jobs
        .par_iter()
        .map(|&(h, k)| {
            let train_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] != h).collect();
            let test_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == h).collect();
            let train = data.select_rows(&train_rows);
            let test = data.select_rows(&test_rows);
            let failed = vec![None; lambda_grid.len()];
            let Ok(x_test) = split_predictors(&test, p) else { return failed };
            let Ok(y_test) = test.select_cols(&(p..p + q).collect::<Vec<_>>()) else {
                // a test row with only predictors observed
                return fold_with_partial_rows(&train, &test, p, k, lambda_grid, opts, &kernel);
            };
            let Ok(joint) = cellcov(&train, k, opts) else { return failed };
            let Ok(pm) = split_predictors(&train, p).and_then(|x| PredictorModel::fit(&x, k, opts)) else {
                return failed;
            };
            let imputed: Result<Vec<DVector<f64>>> = (0..x_test.nrows())
                .map(|i| {
                    let row: Vec<f64> = x_test.row(i).iter().copied().collect();
                    pm.impute(&row, &x_test.row_mask(i)).map(|r| r.0)
                })
                .collect();
            let Ok(imputed) = imputed else { return failed };
            lambda_grid
                .iter()
                .map(|&lambda| {
                    let coef = plugin(&joint.estimate.mu, &joint.estimate.sigma, lambda, p).ok()?;
                    let mut yhat = DMatrix::zeros(imputed.len(), q);
                    for (i, xi) in imputed.iter().enumerate() {
                        let yi = &coef.intercept + coef.slopes.transpose() * xi;
                        yhat.set_row(i, &yi.transpose());
                    }
                    Some(fold_wmse(&y_test, &yhat, &kernel))
                })
                .collect()
        })
        .collect();

    let mut cv_values = Vec::with_capacity(grid.len());
    for (ki, &k) in k_grid.iter().enumerate() {
        for li in 0..lambda_grid.len() {
            let mut total = 0.0;
            let mut count = 0usize;
            let mut failed = false;
            for h in 0..folds {
                let job = jobs.iter().position(|&(jh, jk)| jh == h && jk == k).expect("job exists");
                let _ = ki;
                match &results[job][li] {
                    None => failed = true,
                    Some(w) => {
                        for v in w.iter().filter(|v| v.is_finite()) {
                            total += v;
                            count += 1;
                        }
                    }
                }
            }
            cv_values.push(if failed || count == 0 { f64::INFINITY } else { total / count as f64 });
        }
    }
    let chosen = argmin_grid(&grid, &cv_values);
    Ok(CvReport { grid, cv_values, chosen, fold_assignment: assignment })
}

/// Same as the main fold computation, for a fold where some test rows have
/// no observed response (those rows simply drop out).
fn fold_with_partial_rows(
    train: &DataMatrix,
    test: &DataMatrix,
    p: usize,
    k: usize,
    lambda_grid: &[f64],
    opts: &CovOptions,
    kernel: &Kernel,
) -> Vec<Option<Vec<f64>>> {
    let d = test.ncols();
    let keep: Vec<usize> = (0..test.nrows()).filter(|&i| (p..d).any(|j| test.is_observed(i, j))).collect();
    let failed = vec![None; lambda_grid.len()];
    if keep.is_empty() {
        return lambda_grid.iter().map(|_| Some(vec![f64::NAN; d - p])).collect();
    }
    let test = test.select_rows(&keep);
    let (Ok(x_test), Ok(y_test)) = (split_predictors(&test, p), test.select_cols(&(p..d).collect::<Vec<_>>())) else {
        return failed;
    };
    let Ok(joint) = cellcov(train, k, opts) else { return failed };
    let Ok(pm) = split_predictors(train, p).and_then(|x| PredictorModel::fit(&x, k, opts)) else { return failed };
    let imputed: Result<Vec<DVector<f64>>> = (0..x_test.nrows())
        .map(|i| {
            let row: Vec<f64> = x_test.row(i).iter().copied().collect();
            pm.impute(&row, &x_test.row_mask(i)).map(|r| r.0)
        })
        .collect();
    let Ok(imputed) = imputed else { return failed };
    lambda_grid
        .iter()
        .map(|&lambda| {
            let coef = plugin(&joint.estimate.mu, &joint.estimate.sigma, lambda, p).ok()?;
            let yhat = DMatrix::from_fn(imputed.len(), d - p, |i, j| {
                coef.intercept[j] + (coef.slopes.column(j).transpose() * &imputed[i])[0]
            });
            Some(fold_wmse(&y_test, &yhat, kernel))
        })
        .collect()
}

/// Tuning setup for [`tune`]: `None` grids fall back to the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneOptions {
    pub k_grid: Option<Vec<usize>>,
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { k_grid: None, lambda_grid: None, folds: 10, seed: 0 }
    }
}

/// Cross-validates `(k, lambda)` and refits on all rows with the chosen pair.
///
/// The default ridge grid is built from the predictor block of a pilot
/// cellCov fit at the largest rank in the grid.
pub fn tune(data: &DataMatrix, p: usize, tune: &TuneOptions, opts: &CovOptions) -> Result<(CvReport, RegressionFit)> {
    split_predictors(data, p)?;
    let k_grid = tune.k_grid.clone().unwrap_or_else(|| default_k_grid(data.ncols()));
    let lambda_grid = match &tune.lambda_grid {
        Some(g) => g.clone(),
        None => {
            let kmax = *k_grid.iter().max().ok_or_else(|| Error::InvalidConfig("empty rank grid".into()))?;
            let pilot = cellcov(data, kmax, opts)?;
            default_lambda_grid(&pilot.estimate.sigma.view((0, 0), (p, p)).into_owned())
        }
    };
    let report = cross_validate(data, p, &k_grid, &lambda_grid, tune.folds, tune.seed, opts)?;
    if report.cv_values.iter().all(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("every tuning pair failed in cross-validation".into()));
    }
    let (k, lambda) = report.chosen;
    let fit = fit(data, p, k, lambda, opts)?;
    Ok((report, fit))
}
